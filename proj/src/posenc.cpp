#include "lga/posenc.hpp"

#include <cmath>
#include <memory>

#include "lga/errors.hpp"
#include "lga/ops.hpp"

namespace lga::posenc {

std::string to_string(PosEmb p) {
  switch (p) {
    case PosEmb::Absolute:
      return "absolute";
    case PosEmb::Alibi:
      return "alibi";
    case PosEmb::Rope:
      return "rope";
  }
  return "?";
}

PosEmb parse_pos_emb(const std::string& s) {
  if (s == "absolute") return PosEmb::Absolute;
  if (s == "alibi") return PosEmb::Alibi;
  if (s == "rope") return PosEmb::Rope;
  throw ConfigError("pos_emb", "expected one of absolute|alibi|rope, got '" + s + "'");
}

void RopeParams::validate() const {
  if (head_dim == 0 || head_dim % 2 != 0) {
    throw ConfigError("head_dim", "rotary embedding needs an even head_dim, got " + std::to_string(head_dim));
  }
  if (!(theta > 0.0)) throw ConfigError("rope_theta", "must be positive");
  if (!(scale >= 1.0)) throw ConfigError("rope_scale", "must be >= 1");
}

double rope_inv_freq(std::size_t pair, const RopeParams& params) {
  return std::pow(params.theta, -2.0 * static_cast<double>(pair) / static_cast<double>(params.head_dim));
}

double rope_angle(double position, std::size_t pair, const RopeParams& params) {
  return (position / params.scale) * rope_inv_freq(pair, params);
}

AlibiParams AlibiParams::geometric(std::size_t n_heads) {
  AlibiParams p;
  p.n_heads = n_heads;
  for (std::size_t h = 1; h <= n_heads; ++h) {
    p.slopes.push_back(std::pow(2.0, -8.0 * static_cast<double>(h) / static_cast<double>(n_heads)));
  }
  return p;
}

void AlibiParams::validate() const {
  if (n_heads == 0 || slopes.size() != n_heads) throw ConfigError("n_heads", "alibi needs one slope per head");
  for (std::size_t h = 0; h < slopes.size(); ++h) {
    if (!(slopes[h] > 0.0)) throw ConfigError("alibi slopes must be positive");
    if (h > 0 && !(slopes[h] < slopes[h - 1])) throw ConfigError("alibi slopes must be strictly decreasing");
  }
}

template <typename T>
Tensor<T> sinusoidal_pe(std::size_t pos, std::size_t d) {
  if (d == 0 || d % 2 != 0) throw ConfigError("hidden_size", "sinusoidal embedding needs an even dimension");
  Tensor<T> out(Shape{d});
  for (std::size_t i = 0; i < d / 2; ++i) {
    const double denom = std::pow(10000.0, 2.0 * static_cast<double>(i) / static_cast<double>(d));
    const double arg = static_cast<double>(pos) / denom;
    out[2 * i] = static_cast<T>(std::sin(arg));
    out[2 * i + 1] = static_cast<T>(std::cos(arg));
  }
  return out;
}

template <typename T>
Tensor<T> sinusoidal_table(std::size_t n, std::size_t d) {
  Tensor<T> table(Shape{n, d});
  for (std::size_t p = 0; p < n; ++p) {
    const Tensor<T> row = sinusoidal_pe<T>(p, d);
    std::copy(row.data().begin(), row.data().end(), table.data().begin() + static_cast<std::ptrdiff_t>(p * d));
  }
  return table;
}

template <typename T>
Var<T> add_absolute(Var<T> word_emb, Var<T> pe_table) {
  const Shape& ws = word_emb.shape();
  const Shape& ts = pe_table.shape();
  if (ws.size() < 2 || ts.size() != 2 || ws.back() != ts[1]) {
    throw DimensionError("add_absolute: embeddings " + shape_str(ws) + " vs table " + shape_str(ts));
  }
  const std::size_t n = ws[ws.size() - 2];
  if (n > ts[0]) {
    throw ExtrapolationError("absolute position embedding covers " + std::to_string(ts[0]) +
                             " positions, sequence needs " + std::to_string(n));
  }
  Var<T> rows = n == ts[0] ? pe_table : slice(pe_table, 0, 0, n);
  return add(word_emb, rows);
}

template <typename T>
Tensor<T> alibi_bias(const AlibiParams& params, std::span<const std::int64_t> q_positions,
                     std::span<const std::int64_t> k_positions) {
  params.validate();
  const std::size_t nq = q_positions.size(), nk = k_positions.size();
  Tensor<T> out(Shape{params.n_heads, nq, nk});
  for (std::size_t h = 0; h < params.n_heads; ++h) {
    for (std::size_t i = 0; i < nq; ++i) {
      for (std::size_t j = 0; j < nk; ++j) {
        out.at(h, i, j) = static_cast<T>(-static_cast<double>(q_positions[i] - k_positions[j]) * params.slopes[h]);
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> alibi_key_bias(const AlibiParams& params, std::size_t n_queries, std::span<const std::int64_t> k_positions) {
  params.validate();
  const std::size_t nk = k_positions.size();
  Tensor<T> out(Shape{params.n_heads, n_queries, nk});
  for (std::size_t h = 0; h < params.n_heads; ++h) {
    for (std::size_t i = 0; i < n_queries; ++i) {
      for (std::size_t j = 0; j < nk; ++j) {
        out.at(h, i, j) = static_cast<T>(static_cast<double>(k_positions[j]) * params.slopes[h]);
      }
    }
  }
  return out;
}

namespace {

struct RopeTable {
  std::vector<double> cos, sin;  // [n, head_dim / 2]
};

RopeTable make_table(std::span<const std::int64_t> positions, const RopeParams& params) {
  const std::size_t half = params.head_dim / 2;
  RopeTable t;
  t.cos.resize(positions.size() * half);
  t.sin.resize(positions.size() * half);
  for (std::size_t p = 0; p < positions.size(); ++p) {
    for (std::size_t i = 0; i < half; ++i) {
      const double a = rope_angle(static_cast<double>(positions[p]), i, params);
      t.cos[p * half + i] = std::cos(a);
      t.sin[p * half + i] = std::sin(a);
    }
  }
  return t;
}

// sign = +1 rotates forward, -1 applies the inverse rotation.
template <typename T>
void apply(const T* in, T* out, std::size_t outer, std::size_t n, std::size_t heads, std::size_t head_dim,
           const RopeTable& t, double sign) {
  const std::size_t half = head_dim / 2;
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t base = ((o * n + p) * heads + h) * head_dim;
        for (std::size_t i = 0; i < half; ++i) {
          const T c = static_cast<T>(t.cos[p * half + i]);
          const T s = static_cast<T>(sign * t.sin[p * half + i]);
          const T a = in[base + i], b = in[base + i + half];
          out[base + i] = a * c - b * s;
          out[base + i + half] = a * s + b * c;
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Var<T> rope_rotate(Var<T> x, std::span<const std::int64_t> positions, const RopeParams& params) {
  params.validate();
  const Shape& s = x.shape();
  if (s.size() < 3 || s.back() != params.head_dim || s[s.size() - 3] != positions.size()) {
    throw DimensionError("rope_rotate: input " + shape_str(s) + " does not match " +
                         std::to_string(positions.size()) + " positions with head_dim " +
                         std::to_string(params.head_dim));
  }
  const std::size_t n = positions.size(), heads = s[s.size() - 2], hd = params.head_dim;
  const std::size_t outer = x.value().size() / (n * heads * hd);
  auto table = std::make_shared<RopeTable>(make_table(positions, params));
  Tensor<T> out(s);
  apply(x.value().data().data(), out.data().data(), outer, n, heads, hd, *table, 1.0);
  const std::size_t ix = x.id();
  return x.graph().record(
      std::move(out), {ix},
      [ix, table, outer, n, heads, hd](Graph<T>& gr, std::size_t self) {
        const Tensor<T>& go = gr.grad_buffer(self);
        Tensor<T> back(go.shape());
        apply(go.data().data(), back.data().data(), outer, n, heads, hd, *table, -1.0);
        auto d = gr.grad_buffer(ix).data();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += back[i];
      },
      "rope_rotate");
}

template <typename T>
void rope_rotate_token(std::span<T> x, std::size_t heads, std::int64_t position, const RopeParams& params) {
  if (x.size() != heads * params.head_dim) throw DimensionError("rope_rotate_token: size mismatch");
  const std::int64_t pos[1] = {position};
  const RopeTable table = make_table(pos, params);
  std::vector<T> in(x.begin(), x.end());
  apply(in.data(), x.data(), 1, 1, heads, params.head_dim, table, 1.0);
}

#define LGA_INSTANTIATE_POSENC(T)                                                                          \
  template Tensor<T> sinusoidal_pe<T>(std::size_t, std::size_t);                                          \
  template Tensor<T> sinusoidal_table<T>(std::size_t, std::size_t);                                       \
  template Var<T> add_absolute(Var<T>, Var<T>);                                                           \
  template Tensor<T> alibi_bias<T>(const AlibiParams&, std::span<const std::int64_t>,                     \
                                   std::span<const std::int64_t>);                                        \
  template Tensor<T> alibi_key_bias<T>(const AlibiParams&, std::size_t, std::span<const std::int64_t>);    \
  template Var<T> rope_rotate(Var<T>, std::span<const std::int64_t>, const RopeParams&);                  \
  template void rope_rotate_token(std::span<T>, std::size_t, std::int64_t, const RopeParams&);

LGA_INSTANTIATE_POSENC(float)
LGA_INSTANTIATE_POSENC(double)

}  // namespace lga::posenc
