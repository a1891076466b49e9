#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "lga/model.hpp"

// Equivalence checks run by `lga check`. Each compares two code paths that
// must agree and reports the largest disagreement.
namespace lga::checks {

struct CheckResult {
  std::string suite;
  std::string name;
  double max_diff = 0;
  double tolerance = 0;
  bool pass = false;
};

/// blockwise, ga, group, rope, alibi, cache, grad
const std::vector<std::string>& suite_names();

/// Runs the named suites (all when empty). Throws ConfigError on an unknown
/// suite name.
std::vector<CheckResult> run_checks(const std::vector<std::string>& suites, std::uint64_t seed = 0);

/// Header suite,check,max_diff,tolerance,status.
std::string report_csv(const std::vector<CheckResult>& results);

/// Replaces every weight with draws large enough that all layers matter:
/// matrices N(0, scale), gains 1 + N(0, 0.1), biases N(0, 0.1).
void randomize_weights(model::Model<double>& model, std::mt19937_64& rng, double scale = 0.3);

}  // namespace lga::checks
