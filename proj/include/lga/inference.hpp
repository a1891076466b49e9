#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "lga/model.hpp"
#include "lga/tensor.hpp"

namespace lga::inference {

enum class CacheKind { Global, Local };

/// Keys and values of past tokens for one layer, [entries, heads * head_dim].
/// A Local cache is a ring holding the latest `capacity` entries.
template <typename T>
class LayerCache {
 public:
  LayerCache(CacheKind kind, std::size_t width, std::size_t capacity = 0);

  void append(std::int64_t position, std::span<const T> key, std::span<const T> value);

  CacheKind kind() const noexcept { return kind_; }
  std::size_t size() const noexcept { return count_; }
  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t width() const noexcept { return width_; }

  // Entry 0 is the oldest retained.
  std::int64_t position(std::size_t entry) const;
  std::span<const T> key(std::size_t entry) const;
  std::span<const T> value(std::size_t entry) const;
  std::vector<std::int64_t> positions() const;

 private:
  std::size_t slot(std::size_t entry) const;

  CacheKind kind_;
  std::size_t width_;
  std::size_t capacity_;  // 0: unbounded
  std::size_t head_ = 0;
  std::size_t count_ = 0;
  std::vector<T> keys_;
  std::vector<T> values_;
  std::vector<std::int64_t> positions_;
};

/// Token-at-a-time decoding. Local layers always use sliding-window
/// semantics over the latest w tokens regardless of how the model was
/// trained; rotary angles use absolute positions.
template <typename T>
class DecodeSession {
 public:
  explicit DecodeSession(const model::Model<T>& model);

  /// Fills the caches token by token; returns logits [vocab] for the last
  /// prompt position.
  Tensor<T> prefill(std::span<const std::int32_t> prompt);
  Tensor<T> decode_step(std::int32_t token);

  std::size_t tokens_decoded() const noexcept { return static_cast<std::size_t>(next_pos_); }
  std::size_t n_layers() const noexcept { return caches_.size(); }
  const LayerCache<T>& cache(std::size_t layer) const { return caches_.at(layer); }
  const model::Model<T>& model() const noexcept { return model_; }

 private:
  const model::Model<T>& model_;
  std::vector<LayerCache<T>> caches_;
  std::vector<std::size_t> param_index_;  // first parameter of each layer
  std::int64_t next_pos_ = 0;
};

/// Index of the largest element; ties go to the smallest index.
template <typename T>
std::size_t argmax(std::span<const T> x);

/// Greedy continuation of prompt by n_new tokens (prompt excluded).
template <typename T>
std::vector<std::int32_t> generate(DecodeSession<T>& session, std::span<const std::int32_t> prompt,
                                   std::size_t n_new);

/// Cached K-V entries (summed over layers) after n_tokens under config.
std::size_t cache_entries(const model::ModelConfig& config, std::size_t n_tokens);

/// 2 * entries * hidden_size * bytes_per_element.
std::size_t cache_memory(const model::ModelConfig& config, std::size_t n_tokens, std::size_t bytes_per_element = 4);

}  // namespace lga::inference
