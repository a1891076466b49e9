#pragma once

#include <functional>
#include <string>
#include <vector>

#include "lga/graph.hpp"
#include "lga/tensor.hpp"

namespace lga {

struct GradCheckEntry {
  std::string name;
  // max_i |analytic_i - numeric_i| / max(max_i |analytic_i|, max_i |numeric_i|)
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  bool pass = false;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error() const;
  bool all_pass() const;
};

/// Builds a scalar loss from parameter leaves placed on a fresh graph.
using LossBuilder = std::function<Var<double>(Graph<double>&, const std::vector<Var<double>>&)>;

/// Compares reverse-mode gradients with central differences
/// (f(p+h) - f(p-h)) / 2h for every element of every parameter. The error is
/// normalized by the gradient scale of each parameter tensor, so parameters
/// with vanishing gradients do not amplify rounding noise.
GradCheckReport grad_check(const LossBuilder& f, const std::vector<NamedTensor<double>>& params,
                           double step = 1e-5, double tolerance = 1e-4);

}  // namespace lga
