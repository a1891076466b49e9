#pragma once

#include <cmath>
#include <cstddef>
#include <span>

namespace lga::kernels {

/// Row-major C = alpha * op(A) * op(B) + beta * C, backed by BLAS.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, float alpha, const float* a,
          std::size_t lda, const float* b, std::size_t ldb, float beta, float* c, std::size_t ldc);
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha, const double* a,
          std::size_t lda, const double* b, std::size_t ldb, double beta, double* c, std::size_t ldc);

/// Pins BLAS to one thread so reductions keep a fixed summation order.
void make_blas_deterministic();

inline constexpr double kLayerNormEps = 1e-5;

// 1 - 2 / (1 + e^2u); several times cheaper than std::tanh here.
template <typename T>
T tanh_exp(T u) {
  return T(1) - T(2) / (T(1) + std::exp(T(2) * u));
}

template <typename T>
T gelu(T x) {
  constexpr T k = T(0.7978845608028654);  // sqrt(2/pi)
  const T u = k * (x + T(0.044715) * x * x * x);
  return T(0.5) * x * (T(1) + tanh_exp(u));
}

template <typename T>
T gelu_grad(T x) {
  constexpr T k = T(0.7978845608028654);
  const T x2 = x * x;
  const T u = k * (x + T(0.044715) * x2 * x);
  const T t = tanh_exp(u);
  const T du = k * (T(1) + T(3) * T(0.044715) * x2);
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
}

/// Normalizes one row; returns the reciprocal standard deviation.
template <typename T>
T layer_norm_row(std::span<const T> x, std::span<const T> gain, std::span<const T> bias, std::span<T> out) {
  const std::size_t d = x.size();
  T mean = 0;
  for (auto v : x) mean += v;
  mean /= T(d);
  T var = 0;
  for (auto v : x) var += (v - mean) * (v - mean);
  var /= T(d);
  const T rstd = T(1) / std::sqrt(var + T(kLayerNormEps));
  for (std::size_t i = 0; i < d; ++i) out[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
  return rstd;
}

// Eight independent partial sums break the add latency chain and let the
// compiler vectorize; the summation order is still fixed.
template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
  }
  T s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

template <typename T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace lga::kernels
