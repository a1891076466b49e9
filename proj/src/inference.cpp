#include "lga/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "lga/attention.hpp"
#include "lga/errors.hpp"
#include "lga/kernels.hpp"
#include "lga/posenc.hpp"

namespace lga::inference {

template <typename T>
LayerCache<T>::LayerCache(CacheKind kind, std::size_t width, std::size_t capacity)
    : kind_(kind), width_(width), capacity_(capacity) {
  if (kind == CacheKind::Local && capacity == 0) throw ConfigError("window", "local cache needs capacity >= 1");
  if (kind == CacheKind::Global) capacity_ = 0;
  if (capacity_ > 0) {
    keys_.resize(capacity_ * width_);
    values_.resize(capacity_ * width_);
    positions_.resize(capacity_);
  }
}

template <typename T>
std::size_t LayerCache<T>::slot(std::size_t entry) const {
  if (entry >= count_) throw IndexError("cache entry " + std::to_string(entry) + " of " + std::to_string(count_));
  return capacity_ == 0 ? entry : (head_ + entry) % capacity_;
}

template <typename T>
void LayerCache<T>::append(std::int64_t position, std::span<const T> key, std::span<const T> value) {
  if (key.size() != width_ || value.size() != width_) throw DimensionError("cache append: width mismatch");
  if (capacity_ == 0) {
    keys_.insert(keys_.end(), key.begin(), key.end());
    values_.insert(values_.end(), value.begin(), value.end());
    positions_.push_back(position);
    ++count_;
    return;
  }
  std::size_t s;
  if (count_ < capacity_) {
    s = (head_ + count_) % capacity_;
    ++count_;
  } else {
    s = head_;  // evict oldest
    head_ = (head_ + 1) % capacity_;
  }
  std::copy(key.begin(), key.end(), keys_.begin() + static_cast<std::ptrdiff_t>(s * width_));
  std::copy(value.begin(), value.end(), values_.begin() + static_cast<std::ptrdiff_t>(s * width_));
  positions_[s] = position;
}

template <typename T>
std::int64_t LayerCache<T>::position(std::size_t entry) const {
  return positions_[slot(entry)];
}

template <typename T>
std::span<const T> LayerCache<T>::key(std::size_t entry) const {
  return {keys_.data() + slot(entry) * width_, width_};
}

template <typename T>
std::span<const T> LayerCache<T>::value(std::size_t entry) const {
  return {values_.data() + slot(entry) * width_, width_};
}

template <typename T>
std::vector<std::int64_t> LayerCache<T>::positions() const {
  std::vector<std::int64_t> out(count_);
  for (std::size_t e = 0; e < count_; ++e) out[e] = position(e);
  return out;
}

namespace {

constexpr std::size_t kParamsPerLayer = 12;

// x [d] times w [d, m] -> out [m]
template <typename T>
void vec_mat(const T* x, const Tensor<T>& w, T* out) {
  const std::size_t d = w.dim(0), m = w.dim(1);
  kernels::gemm(false, false, 1, m, d, T(1), x, d, w.data().data(), m, T(0), out, m);
}

}  // namespace

template <typename T>
DecodeSession<T>::DecodeSession(const model::Model<T>& model) : model_(model) {
  const auto& c = model.config();
  const std::size_t first = model.weights().index_of("layers.0.ln1.g");
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto la = model::layer_attention(c, l);
    if (la.type == model::LayerAttention::Type::Local) {
      caches_.emplace_back(CacheKind::Local, c.hidden_size, la.window);
    } else {
      caches_.emplace_back(CacheKind::Global, c.hidden_size);
    }
    param_index_.push_back(first + l * kParamsPerLayer);
  }
}

template <typename T>
Tensor<T> DecodeSession<T>::prefill(std::span<const std::int32_t> prompt) {
  if (prompt.empty()) throw ContractError("prefill: empty prompt");
  if (next_pos_ != 0) throw ContractError("prefill: session already holds tokens");
  Tensor<T> logits;
  for (auto t : prompt) logits = decode_step(t);
  return logits;
}

template <typename T>
Tensor<T> DecodeSession<T>::decode_step(std::int32_t token) {
  const auto& c = model_.config();
  const auto& w = model_.weights().params;
  const std::size_t d = c.hidden_size, H = c.n_heads, hd = c.head_dim;
  if (token < 0 || static_cast<std::size_t>(token) >= c.vocab_size) {
    throw IndexError("decode_step: token " + std::to_string(token) + " outside vocab");
  }
  const std::int64_t pos = next_pos_;

  const Tensor<T>& tok_emb = w[0].value;
  std::vector<T> x(tok_emb.data().begin() + static_cast<std::ptrdiff_t>(token * d),
                   tok_emb.data().begin() + static_cast<std::ptrdiff_t>((token + 1) * d));
  if (c.pos_emb == posenc::PosEmb::Absolute) {
    if (static_cast<std::size_t>(pos) >= c.max_seq_len) {
      throw ExtrapolationError("absolute position embedding covers " + std::to_string(c.max_seq_len) + " positions");
    }
    const Tensor<T> row = c.abs_trainable ? Tensor<T>() : posenc::sinusoidal_pe<T>(static_cast<std::size_t>(pos), d);
    const T* pe = c.abs_trainable ? w[1].value.data().data() + pos * static_cast<std::int64_t>(d) : row.data().data();
    for (std::size_t e = 0; e < d; ++e) x[e] += pe[e];
  }

  std::vector<double> slopes;
  if (c.pos_emb == posenc::PosEmb::Alibi) slopes = posenc::AlibiParams::geometric(H).slopes;
  const posenc::RopeParams rope = c.rope_params();
  const T lambda = T(1) / std::sqrt(T(hd));

  std::vector<T> h(d), q(d), k(d), v(d), ctx(d), tmp(d), ff(c.ff_hidden);
  std::vector<T> scores, head_k, head_v;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::size_t p = param_index_[l];
    auto P = [&](std::size_t i) -> const Tensor<T>& { return w[p + i].value; };
    kernels::layer_norm_row<T>(x, P(0).data(), P(1).data(), h);
    vec_mat(h.data(), P(2), q.data());
    vec_mat(h.data(), P(3), k.data());
    vec_mat(h.data(), P(4), v.data());
    if (c.pos_emb == posenc::PosEmb::Rope) {
      posenc::rope_rotate_token<T>(q, H, pos, rope);
      posenc::rope_rotate_token<T>(k, H, pos, rope);
    }
    LayerCache<T>& cache = caches_[l];
    cache.append(pos, k, v);
    const auto la = model::layer_attention(c, l);
    const std::size_t n = cache.size();

    if (la.type == model::LayerAttention::Type::GlobalApprox) {
      head_k.resize(n * hd);
      head_v.resize(n * hd);
      for (std::size_t hh = 0; hh < H; ++hh) {
        for (std::size_t e = 0; e < n; ++e) {
          std::copy_n(cache.key(e).data() + hh * hd, hd, head_k.data() + e * hd);
          std::copy_n(cache.value(e).data() + hh * hd, hd, head_v.data() + e * hd);
        }
        attention::global_approx_query<T>(std::span<const T>(q.data() + hh * hd, hd), head_k, head_v, la.window,
                                          la.chunk, c.compensation(), slopes.empty() ? 0.0 : slopes[hh],
                                          std::span<T>(ctx.data() + hh * hd, hd));
      }
    } else {
      scores.resize(n);
      std::fill(ctx.begin(), ctx.end(), T(0));
      for (std::size_t hh = 0; hh < H; ++hh) {
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t e = 0; e < n; ++e) {
          T s = lambda * kernels::dot(q.data() + hh * hd, cache.key(e).data() + hh * hd, hd);
          if (!slopes.empty()) s += static_cast<T>(-double(pos - cache.position(e)) * slopes[hh]);
          scores[e] = s;
          mx = std::max(mx, s);
        }
        T total = 0;
        for (auto& s : scores) total += (s = std::exp(s - mx));
        for (std::size_t e = 0; e < n; ++e) {
          kernels::axpy(scores[e] / total, cache.value(e).data() + hh * hd, ctx.data() + hh * hd, hd);
        }
      }
    }
    vec_mat(ctx.data(), P(5), tmp.data());
    for (std::size_t e = 0; e < d; ++e) x[e] += tmp[e];

    kernels::layer_norm_row<T>(x, P(6).data(), P(7).data(), h);
    vec_mat(h.data(), P(8), ff.data());
    for (std::size_t e = 0; e < ff.size(); ++e) ff[e] = kernels::gelu(ff[e] + P(9).data()[e]);
    vec_mat(ff.data(), P(10), tmp.data());
    for (std::size_t e = 0; e < d; ++e) x[e] += tmp[e] + P(11).data()[e];
  }
  const std::size_t lf = w.size() - 2;
  kernels::layer_norm_row<T>(x, w[lf].value.data(), w[lf + 1].value.data(), h);
  Tensor<T> logits(Shape{c.vocab_size});
  kernels::gemm(false, true, 1, c.vocab_size, d, T(1), h.data(), d, tok_emb.data().data(), d, T(0),
                logits.data().data(), c.vocab_size);
  ++next_pos_;
  return logits;
}

template <typename T>
std::size_t argmax(std::span<const T> x) {
  if (x.empty()) throw DimensionError("argmax: empty input");
  std::size_t best = 0;
  for (std::size_t i = 1; i < x.size(); ++i) {
    if (x[i] > x[best]) best = i;
  }
  return best;
}

template <typename T>
std::vector<std::int32_t> generate(DecodeSession<T>& session, std::span<const std::int32_t> prompt,
                                   std::size_t n_new) {
  if (n_new == 0) throw ContractError("generate: n_new must be >= 1");
  Tensor<T> logits = session.prefill(prompt);
  std::vector<std::int32_t> out;
  out.reserve(n_new);
  for (std::size_t t = 0; t < n_new; ++t) {
    const auto next = static_cast<std::int32_t>(argmax<T>(logits.data()));
    out.push_back(next);
    if (t + 1 < n_new) logits = session.decode_step(next);
  }
  return out;
}

std::size_t cache_entries(const model::ModelConfig& config, std::size_t n_tokens) {
  std::size_t total = 0;
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const auto la = model::layer_attention(config, l);
    if (la.type == model::LayerAttention::Type::Local) {
      if (la.window == 0) throw ConfigError("window", "must be >= 1");
      total += std::min(n_tokens, la.window);
    } else {
      total += n_tokens;
    }
  }
  return total;
}

std::size_t cache_memory(const model::ModelConfig& config, std::size_t n_tokens, std::size_t bytes_per_element) {
  return 2 * cache_entries(config, n_tokens) * config.hidden_size * bytes_per_element;
}

template class LayerCache<float>;
template class LayerCache<double>;
template class DecodeSession<float>;
template class DecodeSession<double>;
template std::size_t argmax<float>(std::span<const float>);
template std::size_t argmax<double>(std::span<const double>);
template std::vector<std::int32_t> generate(DecodeSession<float>&, std::span<const std::int32_t>, std::size_t);
template std::vector<std::int32_t> generate(DecodeSession<double>&, std::span<const std::int32_t>, std::size_t);

}  // namespace lga::inference
