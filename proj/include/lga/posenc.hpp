#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lga/graph.hpp"
#include "lga/tensor.hpp"

namespace lga::posenc {

enum class PosEmb { Absolute, Alibi, Rope };

std::string to_string(PosEmb p);
PosEmb parse_pos_emb(const std::string& s);

inline constexpr double kDefaultRopeTheta = 131072.0;

struct RopeParams {
  double theta = kDefaultRopeTheta;
  // Position interpolation divisor: positions are read as p / scale.
  double scale = 1.0;
  std::size_t head_dim = 0;

  void validate() const;
};

/// theta^(-2i / head_dim) for conjugate pair i.
double rope_inv_freq(std::size_t pair, const RopeParams& params);
/// (p / scale) * theta^(-2i / head_dim)
double rope_angle(double position, std::size_t pair, const RopeParams& params);

struct AlibiParams {
  std::size_t n_heads = 0;
  std::vector<double> slopes;

  /// m_h = 2^(-8h / n_heads), h = 1..n_heads.
  static AlibiParams geometric(std::size_t n_heads);
  void validate() const;
};

template <typename T>
Tensor<T> sinusoidal_pe(std::size_t pos, std::size_t d);

/// Rows 0..n-1 of sinusoidal_pe stacked into [n, d].
template <typename T>
Tensor<T> sinusoidal_table(std::size_t n, std::size_t d);

/// word_emb [..., n, d] + pe_table rows 0..n-1. Throws ExtrapolationError
/// when n exceeds the table.
template <typename T>
Var<T> add_absolute(Var<T> word_emb, Var<T> pe_table);

/// bias[h, i, j] = -(q_pos[i] - k_pos[j]) * m_h. Entries with k_pos > q_pos
/// are filled with the same formula but are never admissible downstream.
template <typename T>
Tensor<T> alibi_bias(const AlibiParams& params, std::span<const std::int64_t> q_positions,
                     std::span<const std::int64_t> k_positions);

/// bias[h, i, j] = +k_pos[j] * m_h: alibi_bias with the row-constant
/// -q_pos[i] * m_h removed. Softmax rows are the same under either form.
template <typename T>
Tensor<T> alibi_key_bias(const AlibiParams& params, std::size_t n_queries, std::span<const std::int64_t> k_positions);

/// Rotates x [..., n, heads, head_dim]; positions has length n. Dimension d
/// pairs with d + head_dim/2.
template <typename T>
Var<T> rope_rotate(Var<T> x, std::span<const std::int64_t> positions, const RopeParams& params);

/// Rotates one token's [heads * head_dim] vector in place.
template <typename T>
void rope_rotate_token(std::span<T> x, std::size_t heads, std::int64_t position, const RopeParams& params);

}  // namespace lga::posenc
