#include "lga/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "lga/errors.hpp"
#include "lga/kernels.hpp"
#include "lga/ops.hpp"

namespace lga::attention {

namespace {

thread_local std::uint64_t g_macs = 0;
bool g_blockwise_fault = false;

struct Dims {
  std::size_t batch = 1, n = 0, heads = 0, head_dim = 0;
  bool rank3 = false;

  std::size_t at(std::size_t b, std::size_t i, std::size_t h) const { return ((b * n + i) * heads + h) * head_dim; }
};

Dims dims_of(const Shape& q, const Shape& k, const Shape& v) {
  if (q != k || q != v || (q.size() != 3 && q.size() != 4)) {
    throw DimensionError("attention: q/k/v must share shape [batch, n, heads, head_dim], got " + shape_str(q) + ", " +
                         shape_str(k) + ", " + shape_str(v));
  }
  Dims d;
  d.rank3 = q.size() == 3;
  const std::size_t o = d.rank3 ? 0 : 1;
  d.batch = d.rank3 ? 1 : q[0];
  d.n = q[o];
  d.heads = q[o + 1];
  d.head_dim = q[o + 2];
  return d;
}

void check_options(const Dims& d, const AttnOptions& opts) {
  if (!opts.valid.empty() && opts.valid.size() != d.batch * d.n) {
    throw DimensionError("attention: validity mask has " + std::to_string(opts.valid.size()) + " entries, expected " +
                         std::to_string(d.batch * d.n));
  }
  if (!opts.alibi_slopes.empty() && opts.alibi_slopes.size() != d.heads) {
    throw DimensionError("attention: " + std::to_string(opts.alibi_slopes.size()) + " alibi slopes for " +
                         std::to_string(d.heads) + " heads");
  }
}

bool token_valid(const AttnOptions& opts, const Dims& d, std::size_t b, std::size_t j) {
  return opts.valid.empty() || opts.valid[b * d.n + j] != 0;
}

// -(query position - key position) * slope; zero without alibi.
double distance_bias(const AttnOptions& opts, std::size_t h, double qpos, double kpos) {
  if (opts.alibi_slopes.empty()) return 0.0;
  return -(qpos - kpos) * opts.alibi_slopes[h];
}

template <typename T>
Var<T> as_rank4(Var<T> x) {
  const Shape& s = x.shape();
  if (s.size() == 3) return reshape(x, Shape{1, s[0], s[1], s[2]});
  return x;
}

template <typename T>
Var<T> restore_rank(Var<T> x, const Dims& d) {
  if (!d.rank3) return x;
  return reshape(x, Shape{d.n, d.heads, d.head_dim});
}

}  // namespace

void validate(const AttnKind& kind) {
  std::visit(
      [](const auto& k) {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, LocalKind>) {
          if (k.window < 1) throw ConfigError("window", "must be >= 1");
        } else if constexpr (std::is_same_v<K, GlobalApproxKind>) {
          if (k.window < 1) throw ConfigError("window", "must be >= 1");
          if (k.chunk < 1) throw ConfigError("chunk", "must be >= 1");
        } else if constexpr (std::is_same_v<K, GroupKind>) {
          if (k.group_size < 1) throw ConfigError("group_size", "must be >= 1");
          if (k.window < 1) throw ConfigError("window", "must be >= 1");
        }
      },
      kind);
}

std::string describe(const AttnKind& kind) {
  return std::visit(
      [](const auto& k) -> std::string {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, GlobalKind>) {
          return "global";
        } else if constexpr (std::is_same_v<K, LocalKind>) {
          return "local(w=" + std::to_string(k.window) + ")";
        } else if constexpr (std::is_same_v<K, GlobalApproxKind>) {
          return "global_approx(w=" + std::to_string(k.window) + ",c=" + std::to_string(k.chunk) + ")";
        } else {
          return "group(L=" + std::to_string(k.group_size) + ",w=" + std::to_string(k.window) + ")";
        }
      },
      kind);
}

LayerKind layer_kind(std::size_t layer, std::size_t group_size) {
  if (group_size < 1) throw ConfigError("group_size", "must be >= 1");
  return layer % group_size == 0 ? LayerKind::Global : LayerKind::Local;
}

GroupSchedule GroupSchedule::make(std::size_t n_layers, std::size_t group_size) {
  GroupSchedule s;
  s.n_layers = n_layers;
  s.group_size = group_size;
  for (std::size_t l = 0; l < n_layers; ++l) s.kinds.push_back(layer_kind(l, group_size));
  return s;
}

std::size_t GroupSchedule::global_layers() const {
  return static_cast<std::size_t>(std::count(kinds.begin(), kinds.end(), LayerKind::Global));
}

std::string to_string(LocalSemantics s) {
  return s == LocalSemantics::SlidingWindow ? "sliding_window" : "block_banded";
}

LocalSemantics parse_local_semantics(const std::string& s) {
  if (s == "sliding_window") return LocalSemantics::SlidingWindow;
  if (s == "block_banded") return LocalSemantics::BlockBanded;
  throw ConfigError("local_semantics", "expected block_banded|sliding_window, got '" + s + "'");
}

std::uint64_t mac_count() { return g_macs; }
void reset_mac_count() { g_macs = 0; }
void add_macs(std::uint64_t n) { g_macs += n; }
void set_blockwise_mask_fault(bool enabled) { g_blockwise_fault = enabled; }
bool blockwise_mask_fault() { return g_blockwise_fault; }

template <typename T>
std::tuple<Var<T>, Var<T>, Var<T>> qkv_project(Var<T> h, Var<T> wq, Var<T> wk, Var<T> wv, std::size_t heads) {
  const Shape& hs = h.shape();
  const std::size_t d = hs.back();
  for (const Var<T>* w : {&wq, &wk, &wv}) {
    if (w->shape() != Shape{d, d}) {
      throw ConfigError("hidden_size", "projection " + shape_str(w->shape()) + " does not match hidden size " +
                                           std::to_string(d));
    }
  }
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("n_heads", "hidden size " + std::to_string(d) + " is not divisible by " + std::to_string(heads));
  }
  Shape split(hs.begin(), hs.end() - 1);
  split.push_back(heads);
  split.push_back(d / heads);
  return {reshape(matmul(h, wq), split), reshape(matmul(h, wk), split), reshape(matmul(h, wv), split)};
}

double sim(std::span<const double> q, std::span<const double> k, std::size_t normalizer) {
  if (q.size() != k.size()) throw DimensionError("sim: query and key lengths differ");
  return std::exp(kernels::dot(q.data(), k.data(), q.size()) / std::sqrt(static_cast<double>(normalizer)));
}

template <typename T>
Var<T> masked_attention(Var<T> q, Var<T> k, Var<T> v, std::span<const std::size_t> window_start,
                        const AttnOptions& opts) {
  const Dims d = dims_of(q.shape(), k.shape(), v.shape());
  check_options(d, opts);
  if (window_start.size() != d.n) throw DimensionError("masked_attention: window_start length mismatch");
  for (std::size_t i = 0; i < d.n; ++i) {
    if (window_start[i] > i) throw ContractError("masked_attention: window start after query position");
  }
  const T lambda = T(1) / std::sqrt(T(d.head_dim));

  // Probabilities for keys window_start[i]..i of every (b, h, i) row.
  std::vector<std::size_t> row_off(d.n + 1, 0);
  for (std::size_t i = 0; i < d.n; ++i) row_off[i + 1] = row_off[i] + (i - window_start[i] + 1);
  const std::size_t per_bh = row_off[d.n];
  auto probs = std::make_shared<std::vector<T>>(d.batch * d.heads * per_bh, T(0));
  auto starts = std::make_shared<std::vector<std::size_t>>(window_start.begin(), window_start.end());

  const T* Q = q.value().data().data();
  const T* K = k.value().data().data();
  const T* V = v.value().data().data();
  Tensor<T> out(q.shape());
  T* O = out.data().data();
  std::uint64_t admitted = 0;
  std::vector<T> logits;
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t h = 0; h < d.heads; ++h) {
      T* P = probs->data() + (b * d.heads + h) * per_bh;
      for (std::size_t i = 0; i < d.n; ++i) {
        const std::size_t lo = window_start[i];
        const std::size_t len = i - lo + 1;
        const T* qi = Q + d.at(b, i, h);
        logits.assign(len, -std::numeric_limits<T>::infinity());
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = lo; j <= i; ++j) {
          if (j != i && !token_valid(opts, d, b, j)) continue;
          const T s = lambda * kernels::dot(qi, K + d.at(b, j, h), d.head_dim) +
                      static_cast<T>(distance_bias(opts, h, double(i), double(j)));
          logits[j - lo] = s;
          mx = std::max(mx, s);
          ++admitted;
        }
        T total = 0;
        T* pr = P + row_off[i];
        for (std::size_t t = 0; t < len; ++t) {
          pr[t] = std::isinf(logits[t]) ? T(0) : std::exp(logits[t] - mx);
          total += pr[t];
        }
        T* oi = O + d.at(b, i, h);
        for (std::size_t t = 0; t < len; ++t) {
          pr[t] /= total;
          if (pr[t] != T(0)) kernels::axpy(pr[t], V + d.at(b, lo + t, h), oi, d.head_dim);
        }
      }
    }
  }
  add_macs(2 * admitted * d.head_dim);

  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  return q.graph().record(
      std::move(out), {iq, ik, iv},
      [iq, ik, iv, d, probs, starts, row_off, per_bh, lambda](Graph<T>& gr, std::size_t self) {
        const T* G = gr.grad_buffer(self).data().data();
        const T* Q = gr.value(iq).data().data();
        const T* K = gr.value(ik).data().data();
        const T* V = gr.value(iv).data().data();
        T* dQ = gr.requires_grad(iq) ? gr.grad_buffer(iq).data().data() : nullptr;
        T* dK = gr.requires_grad(ik) ? gr.grad_buffer(ik).data().data() : nullptr;
        T* dV = gr.requires_grad(iv) ? gr.grad_buffer(iv).data().data() : nullptr;
        std::vector<T> dp;
        for (std::size_t b = 0; b < d.batch; ++b) {
          for (std::size_t h = 0; h < d.heads; ++h) {
            const T* P = probs->data() + (b * d.heads + h) * per_bh;
            for (std::size_t i = 0; i < d.n; ++i) {
              const std::size_t lo = (*starts)[i];
              const std::size_t len = i - lo + 1;
              const T* pr = P + row_off[i];
              const T* gi = G + d.at(b, i, h);
              dp.assign(len, T(0));
              T weighted = 0;
              for (std::size_t t = 0; t < len; ++t) {
                if (pr[t] == T(0)) continue;
                dp[t] = kernels::dot(gi, V + d.at(b, lo + t, h), d.head_dim);
                weighted += pr[t] * dp[t];
                if (dV) kernels::axpy(pr[t], gi, dV + d.at(b, lo + t, h), d.head_dim);
              }
              for (std::size_t t = 0; t < len; ++t) {
                if (pr[t] == T(0)) continue;
                const T ds = lambda * pr[t] * (dp[t] - weighted);
                if (dQ) kernels::axpy(ds, K + d.at(b, lo + t, h), dQ + d.at(b, i, h), d.head_dim);
                if (dK) kernels::axpy(ds, Q + d.at(b, i, h), dK + d.at(b, lo + t, h), d.head_dim);
              }
            }
          }
        }
      },
      "masked_attention");
}

template <typename T>
Var<T> global_attention(Var<T> q, Var<T> k, Var<T> v, const AttnOptions& opts) {
  const Dims d = dims_of(q.shape(), k.shape(), v.shape());
  std::vector<std::size_t> starts(d.n, 0);
  return masked_attention(q, k, v, starts, opts);
}

template <typename T>
Var<T> local_attention_naive(Var<T> q, Var<T> k, Var<T> v, std::size_t window, LocalSemantics semantics,
                             const AttnOptions& opts) {
  if (window < 1) throw ConfigError("window", "must be >= 1");
  const Dims d = dims_of(q.shape(), k.shape(), v.shape());
  std::vector<std::size_t> starts(d.n);
  for (std::size_t i = 0; i < d.n; ++i) {
    if (semantics == LocalSemantics::SlidingWindow) {
      starts[i] = i + 1 > window ? i + 1 - window : 0;
    } else {
      const std::size_t block = i / window;
      starts[i] = block > 0 ? (block - 1) * window : 0;
    }
  }
  return masked_attention(q, k, v, starts, opts);
}

template <typename T>
Var<T> local_attention_blockwise(Var<T> q, Var<T> k, Var<T> v, std::size_t window, const AttnOptions& opts) {
  if (window < 1) throw ConfigError("window", "must be >= 1");
  const Dims d = dims_of(q.shape(), k.shape(), v.shape());
  check_options(d, opts);
  const std::size_t w = window;
  const std::size_t nb = (d.n + w - 1) / w;
  const std::size_t padded = nb * w;
  const std::size_t B = d.batch, H = d.heads, D = d.head_dim;
  q = as_rank4(q);
  k = as_rank4(k);
  v = as_rank4(v);

  auto pad_to_multiple = [&](Var<T> x) { return padded == d.n ? x : pad(x, 1, 0, padded - d.n); };
  auto split_into_blocks = [&](Var<T> x) { return reshape(x, Shape{B, nb, w, H, D}); };
  // Each block of keys/values is preceded by the block before it; block 0
  // is preceded by zeros that the mask never admits.
  auto concatenate_2_blocks = [&](Var<T> x) {
    Var<T> prev = slice(pad(x, 1, 1, 0), 1, 0, nb);
    return concat<T>({prev, x}, 2);
  };

  Var<T> q_local = split_into_blocks(pad_to_multiple(q));
  Var<T> k_local = concatenate_2_blocks(split_into_blocks(pad_to_multiple(k)));
  Var<T> v_local = concatenate_2_blocks(split_into_blocks(pad_to_multiple(v)));

  // [B, nb, H, w, D] x [B, nb, H, D, 2w] -> [B, nb, H, w, 2w]
  Var<T> qh = permute(q_local, {0, 1, 3, 2, 4});
  Var<T> kt = permute(k_local, {0, 1, 3, 4, 2});
  Var<T> scores = scale(matmul(qh, kt), T(1) / std::sqrt(T(D)));

  if (!opts.alibi_slopes.empty()) {
    Tensor<T> bias(Shape{nb, H, w, 2 * w});
    for (std::size_t blk = 0; blk < nb; ++blk) {
      for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t r = 0; r < w; ++r) {
          for (std::size_t s = 0; s < 2 * w; ++s) {
            const double qpos = double(blk * w + r);
            const double kpos = double(blk * w + s) - double(w);
            bias.at(blk, h, r, s) = static_cast<T>(distance_bias(opts, h, qpos, kpos));
          }
        }
      }
    }
    scores = add(scores, q.graph().constant(std::move(bias)));
  }

  // Original validity combined with the per-block causal band.
  const std::int64_t leak = g_blockwise_fault ? 1 : 0;
  Mask mask(Shape{B, nb, 1, w, 2 * w}, 0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t blk = 0; blk < nb; ++blk) {
      for (std::size_t r = 0; r < w; ++r) {
        const std::int64_t qpos = std::int64_t(blk * w + r);
        for (std::size_t s = 0; s < 2 * w; ++s) {
          const std::int64_t kpos = std::int64_t(blk * w + s) - std::int64_t(w);
          bool ok = kpos >= 0 && kpos <= qpos + leak;
          if (ok && kpos != qpos) {
            ok = kpos < std::int64_t(d.n) && token_valid(opts, d, b, std::size_t(kpos));
          }
          mask.at(b, blk, 0, r, s) = ok ? 1 : 0;
        }
      }
    }
  }
  Var<T> probs = softmax_masked(scores, mask);

  // [B, nb, H, w, 2w] x [B, nb, H, 2w, D] -> [B, nb, H, w, D]
  Var<T> vh = permute(v_local, {0, 1, 3, 2, 4});
  Var<T> ctx = permute(matmul(probs, vh), {0, 1, 3, 2, 4});
  Var<T> out = reshape(ctx, Shape{B, padded, H, D});
  if (padded != d.n) out = slice(out, 1, 0, d.n);
  add_macs(2ull * B * nb * H * w * 2 * w * D);
  return restore_rank(out, d);
}

template <typename T>
Tensor<T> chunk_summaries(const Tensor<T>& x, std::size_t chunk, Compensation comp) {
  if (chunk < 1) throw ConfigError("chunk", "must be >= 1");
  if (x.rank() != 3) throw DimensionError("chunk_summaries: expected [n, heads, head_dim], got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), width = x.dim(1) * x.dim(2);
  const std::size_t m = n / chunk;
  if (m == 0) throw DimensionError("chunk_summaries: sequence of " + std::to_string(n) + " has no full chunk");
  Tensor<T> out(Shape{m, x.dim(1), x.dim(2)});
  const T comp_term = comp == Compensation::Literal ? static_cast<T>(std::log(double(chunk))) : T(0);
  for (std::size_t s = 0; s < m; ++s) {
    for (std::size_t e = 0; e < width; ++e) {
      T acc = 0;
      for (std::size_t t = s * chunk; t < (s + 1) * chunk; ++t) acc += x[t * width + e];
      out[s * width + e] = comp == Compensation::Literal ? acc + comp_term : acc / T(chunk);
    }
  }
  return out;
}

std::size_t approx_first_token(std::size_t i, std::size_t window, std::size_t chunk) {
  // Non-local region is 0..i-w; chunks must end inside it.
  if (i + 1 <= window) return 0;
  const std::size_t boundary = i + 1 - window;
  return (boundary / chunk) * chunk;
}

template <typename T>
Var<T> global_approx_attention(Var<T> q, Var<T> k, Var<T> v, std::size_t window, std::size_t chunk,
                               const AttnOptions& opts, Compensation comp) {
  if (window < 1) throw ConfigError("window", "must be >= 1");
  if (chunk < 1) throw ConfigError("chunk", "must be >= 1");
  const Dims d = dims_of(q.shape(), k.shape(), v.shape());
  check_options(d, opts);
  const std::size_t c = chunk, D = d.head_dim, m = d.n / c;
  const T lambda = T(1) / std::sqrt(T(D));
  const T ln_c = static_cast<T>(std::log(double(c)));

  // Per query: number of summaries, then tokens first..i.
  std::vector<std::size_t> first(d.n), row_off(d.n + 1, 0);
  for (std::size_t i = 0; i < d.n; ++i) {
    first[i] = approx_first_token(i, window, c);
    row_off[i + 1] = row_off[i] + first[i] / c + (i - first[i] + 1);
  }
  const std::size_t per_bh = row_off[d.n];

  struct Saved {
    std::vector<T> probs;                // [B, H, per_bh]
    std::vector<T> ks, vs;               // [B, H, m, D]
    std::vector<std::size_t> counts;     // [B, m] valid tokens per chunk
  };
  auto sv = std::make_shared<Saved>();
  sv->probs.assign(d.batch * d.heads * per_bh, T(0));
  sv->ks.assign(d.batch * d.heads * m * D, T(0));
  sv->vs.assign(d.batch * d.heads * m * D, T(0));
  sv->counts.assign(d.batch * m, 0);

  const T* Q = q.value().data().data();
  const T* K = k.value().data().data();
  const T* V = v.value().data().data();
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t s = 0; s < m; ++s) {
      for (std::size_t t = s * c; t < (s + 1) * c; ++t) sv->counts[b * m + s] += token_valid(opts, d, b, t) ? 1 : 0;
    }
    for (std::size_t h = 0; h < d.heads; ++h) {
      for (std::size_t s = 0; s < m; ++s) {
        T* ks = sv->ks.data() + ((b * d.heads + h) * m + s) * D;
        T* vs = sv->vs.data() + ((b * d.heads + h) * m + s) * D;
        const std::size_t cnt = sv->counts[b * m + s];
        for (std::size_t t = s * c; t < (s + 1) * c; ++t) {
          if (!token_valid(opts, d, b, t)) continue;
          kernels::axpy(T(1), K + d.at(b, t, h), ks, D);
          kernels::axpy(T(1), V + d.at(b, t, h), vs, D);
        }
        for (std::size_t e = 0; e < D; ++e) {
          if (comp == Compensation::Literal) {
            ks[e] += ln_c;
            vs[e] += ln_c;
          } else if (cnt > 0) {
            ks[e] /= T(cnt);
            vs[e] /= T(cnt);
          }
        }
      }
    }
  }

  Tensor<T> out(q.shape());
  T* O = out.data().data();
  std::uint64_t admitted = 0;
  std::vector<T> logits;
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t h = 0; h < d.heads; ++h) {
      const T* KS = sv->ks.data() + (b * d.heads + h) * m * D;
      const T* VS = sv->vs.data() + (b * d.heads + h) * m * D;
      T* P = sv->probs.data() + (b * d.heads + h) * per_bh;
      for (std::size_t i = 0; i < d.n; ++i) {
        const std::size_t ns = first[i] / c;
        const std::size_t len = row_off[i + 1] - row_off[i];
        const T* qi = Q + d.at(b, i, h);
        logits.assign(len, -std::numeric_limits<T>::infinity());
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t s = 0; s < ns; ++s) {
          const std::size_t cnt = sv->counts[b * m + s];
          if (cnt == 0) continue;
          const double center = double(s * c) + double(c - 1) / 2.0;
          T l = lambda * kernels::dot(qi, KS + s * D, D) + static_cast<T>(distance_bias(opts, h, double(i), center));
          if (comp == Compensation::LogitSide) l += static_cast<T>(std::log(double(cnt)));
          logits[s] = l;
          mx = std::max(mx, l);
          ++admitted;
        }
        for (std::size_t j = first[i]; j <= i; ++j) {
          if (j != i && !token_valid(opts, d, b, j)) continue;
          const T l = lambda * kernels::dot(qi, K + d.at(b, j, h), D) +
                      static_cast<T>(distance_bias(opts, h, double(i), double(j)));
          logits[ns + j - first[i]] = l;
          mx = std::max(mx, l);
          ++admitted;
        }
        T* pr = P + row_off[i];
        T total = 0;
        for (std::size_t t = 0; t < len; ++t) {
          pr[t] = std::isinf(logits[t]) ? T(0) : std::exp(logits[t] - mx);
          total += pr[t];
        }
        T* oi = O + d.at(b, i, h);
        for (std::size_t t = 0; t < len; ++t) {
          pr[t] /= total;
          if (pr[t] == T(0)) continue;
          const T* val = t < ns ? VS + t * D : V + d.at(b, first[i] + t - ns, h);
          kernels::axpy(pr[t], val, oi, D);
        }
      }
    }
  }
  add_macs(2 * admitted * D);

  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  Var<T> result = q.graph().record(
      std::move(out), {iq, ik, iv},
      [iq, ik, iv, d, sv, first, row_off, per_bh, m, c, lambda, comp, opts](Graph<T>& gr, std::size_t self) {
        const std::size_t D = d.head_dim;
        const T* G = gr.grad_buffer(self).data().data();
        const T* Q = gr.value(iq).data().data();
        const T* K = gr.value(ik).data().data();
        const T* V = gr.value(iv).data().data();
        T* dQ = gr.requires_grad(iq) ? gr.grad_buffer(iq).data().data() : nullptr;
        T* dK = gr.requires_grad(ik) ? gr.grad_buffer(ik).data().data() : nullptr;
        T* dV = gr.requires_grad(iv) ? gr.grad_buffer(iv).data().data() : nullptr;
        std::vector<T> dks(m * D), dvs(m * D), dp;
        for (std::size_t b = 0; b < d.batch; ++b) {
          for (std::size_t h = 0; h < d.heads; ++h) {
            std::fill(dks.begin(), dks.end(), T(0));
            std::fill(dvs.begin(), dvs.end(), T(0));
            const T* KS = sv->ks.data() + (b * d.heads + h) * m * D;
            const T* VS = sv->vs.data() + (b * d.heads + h) * m * D;
            const T* P = sv->probs.data() + (b * d.heads + h) * per_bh;
            for (std::size_t i = 0; i < d.n; ++i) {
              const std::size_t ns = first[i] / c;
              const std::size_t len = row_off[i + 1] - row_off[i];
              const T* pr = P + row_off[i];
              const T* gi = G + d.at(b, i, h);
              dp.assign(len, T(0));
              T weighted = 0;
              for (std::size_t t = 0; t < len; ++t) {
                if (pr[t] == T(0)) continue;
                const bool summary = t < ns;
                const T* val = summary ? VS + t * D : V + d.at(b, first[i] + t - ns, h);
                dp[t] = kernels::dot(gi, val, D);
                weighted += pr[t] * dp[t];
                if (summary) {
                  kernels::axpy(pr[t], gi, dvs.data() + t * D, D);
                } else if (dV) {
                  kernels::axpy(pr[t], gi, dV + d.at(b, first[i] + t - ns, h), D);
                }
              }
              for (std::size_t t = 0; t < len; ++t) {
                if (pr[t] == T(0)) continue;
                const T ds = lambda * pr[t] * (dp[t] - weighted);
                const bool summary = t < ns;
                const T* key = summary ? KS + t * D : K + d.at(b, first[i] + t - ns, h);
                if (dQ) kernels::axpy(ds, key, dQ + d.at(b, i, h), D);
                if (summary) {
                  kernels::axpy(ds, Q + d.at(b, i, h), dks.data() + t * D, D);
                } else if (dK) {
                  kernels::axpy(ds, Q + d.at(b, i, h), dK + d.at(b, first[i] + t - ns, h), D);
                }
              }
            }
            // Chunk summaries are (scaled) sums of their valid tokens.
            for (std::size_t s = 0; s < m; ++s) {
              const std::size_t cnt = sv->counts[b * m + s];
              if (cnt == 0) continue;
              const T f = comp == Compensation::Literal ? T(1) : T(1) / T(cnt);
              for (std::size_t t = s * c; t < (s + 1) * c; ++t) {
                if (!opts.valid.empty() && !opts.valid[b * d.n + t]) continue;
                if (dK) kernels::axpy(f, dks.data() + s * D, dK + d.at(b, t, h), D);
                if (dV) kernels::axpy(f, dvs.data() + s * D, dV + d.at(b, t, h), D);
              }
            }
          }
        }
      },
      "global_approx_attention");
  return result;
}

template <typename T>
void global_approx_query(std::span<const T> q, std::span<const T> keys, std::span<const T> values,
                         std::size_t window, std::size_t chunk, Compensation comp, double alibi_slope,
                         std::span<T> out) {
  const std::size_t D = q.size();
  if (D == 0 || keys.size() % D != 0 || keys.size() != values.size() || out.size() != D) {
    throw DimensionError("global_approx_query: inconsistent sizes");
  }
  const std::size_t i = keys.size() / D - 1;
  const std::size_t first = approx_first_token(i, window, chunk);
  const std::size_t ns = first / chunk;
  const double lambda = 1.0 / std::sqrt(double(D));
  const double ln_c = std::log(double(chunk));

  std::vector<double> logits;
  std::vector<std::vector<double>> vals;
  std::vector<double> ksum(D), vsum(D);
  for (std::size_t s = 0; s < ns; ++s) {
    std::fill(ksum.begin(), ksum.end(), 0.0);
    std::fill(vsum.begin(), vsum.end(), 0.0);
    for (std::size_t t = s * chunk; t < (s + 1) * chunk; ++t) {
      for (std::size_t e = 0; e < D; ++e) {
        ksum[e] += keys[t * D + e];
        vsum[e] += values[t * D + e];
      }
    }
    double l = 0;
    for (std::size_t e = 0; e < D; ++e) {
      const double ke = comp == Compensation::Literal ? ksum[e] + ln_c : ksum[e] / double(chunk);
      l += double(q[e]) * ke;
      vsum[e] = comp == Compensation::Literal ? vsum[e] + ln_c : vsum[e] / double(chunk);
    }
    l *= lambda;
    if (comp == Compensation::LogitSide) l += ln_c;
    const double center = double(s * chunk) + double(chunk - 1) / 2.0;
    l += -(double(i) - center) * alibi_slope;
    logits.push_back(l);
    vals.push_back(vsum);
  }
  for (std::size_t j = first; j <= i; ++j) {
    double l = 0;
    for (std::size_t e = 0; e < D; ++e) l += double(q[e]) * double(keys[j * D + e]);
    logits.push_back(l * lambda - (double(i) - double(j)) * alibi_slope);
    vals.emplace_back(values.begin() + static_cast<std::ptrdiff_t>(j * D),
                      values.begin() + static_cast<std::ptrdiff_t>((j + 1) * D));
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double total = 0;
  for (auto& l : logits) total += (l = std::exp(l - mx));
  std::vector<double> acc(D, 0.0);
  for (std::size_t t = 0; t < logits.size(); ++t) {
    for (std::size_t e = 0; e < D; ++e) acc[e] += logits[t] / total * vals[t][e];
  }
  for (std::size_t e = 0; e < D; ++e) out[e] = static_cast<T>(acc[e]);
}

#define LGA_INSTANTIATE_ATTN(T)                                                                                 \
  template std::tuple<Var<T>, Var<T>, Var<T>> qkv_project(Var<T>, Var<T>, Var<T>, Var<T>, std::size_t);        \
  template Var<T> masked_attention(Var<T>, Var<T>, Var<T>, std::span<const std::size_t>, const AttnOptions&);  \
  template Var<T> global_attention(Var<T>, Var<T>, Var<T>, const AttnOptions&);                               \
  template Var<T> local_attention_naive(Var<T>, Var<T>, Var<T>, std::size_t, LocalSemantics,                  \
                                        const AttnOptions&);                                                   \
  template Var<T> local_attention_blockwise(Var<T>, Var<T>, Var<T>, std::size_t, const AttnOptions&);         \
  template Tensor<T> chunk_summaries(const Tensor<T>&, std::size_t, Compensation);                            \
  template Var<T> global_approx_attention(Var<T>, Var<T>, Var<T>, std::size_t, std::size_t, const AttnOptions&, \
                                          Compensation);                                                       \
  template void global_approx_query(std::span<const T>, std::span<const T>, std::span<const T>, std::size_t,  \
                                    std::size_t, Compensation, double, std::span<T>);

LGA_INSTANTIATE_ATTN(float)
LGA_INSTANTIATE_ATTN(double)

}  // namespace lga::attention
