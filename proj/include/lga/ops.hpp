#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "lga/graph.hpp"
#include "lga/tensor.hpp"

// Differentiable primitives over Graph<T>. Every op checks shapes up front and
// throws DimensionError naming the offending shapes. Binary elementwise ops
// broadcast numpy-style (right-aligned, size-1 dimensions stretch).
namespace lga {

using Mask = Tensor<std::uint8_t>;

Shape broadcast_shapes(const Shape& a, const Shape& b);

template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> sub(Var<T> a, Var<T> b);
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);
template <typename T>
Var<T> scale(Var<T> a, T factor);

/// Batched contraction [..., m, k] x [..., k, n] -> [..., m, n]; batch
/// dimensions broadcast.
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b);

template <typename T>
Var<T> permute(Var<T> a, const std::vector<std::size_t>& axes);
/// Swaps the last two axes.
template <typename T>
Var<T> transpose(Var<T> a);
template <typename T>
Var<T> reshape(Var<T> a, Shape shape);
template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis);
/// Zero padding along one axis.
template <typename T>
Var<T> pad(Var<T> a, std::size_t axis, std::size_t before, std::size_t after);
template <typename T>
Var<T> slice(Var<T> a, std::size_t axis, std::size_t start, std::size_t length);

/// Row gather from a [vocab, d] table; output shape is index_shape + [d].
/// The backward pass scatter-adds into the table.
template <typename T>
Var<T> embedding(Var<T> table, std::span<const std::int32_t> ids, const Shape& index_shape);

/// Normalizes over the last axis, then applies gain and bias (both [d]).
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias);

/// tanh approximation, as in GPT-2.
template <typename T>
Var<T> gelu(Var<T> x);

/// Softmax over the last axis restricted to entries where mask == 1. The mask
/// broadcasts over leading axes but must match the last axis exactly. Masked
/// entries come out exactly 0. Throws DegenerateError on a fully masked row.
template <typename T>
Var<T> softmax_masked(Var<T> logits, const Mask& mask);

/// Mean negative log-likelihood over rows of logits [..., vocab]. `keep`
/// (one flag per row, empty means keep all) excludes positions from the mean.
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::int32_t> targets, std::span<const std::uint8_t> keep = {});

template <typename T>
Var<T> sum(Var<T> a);
template <typename T>
Var<T> mean(Var<T> a);

}  // namespace lga
