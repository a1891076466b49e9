#pragma once

#include <stdexcept>
#include <string>

namespace lga {

// Shape or rank disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Token id, target id or position outside the admissible range.
class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Invalid configuration (bad key, bad value, violated invariant).
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(const std::string& key, const std::string& what)
      : std::invalid_argument(key.empty() ? what : key + ": " + what), key_(key) {}
  explicit ConfigError(const std::string& what) : ConfigError("", what) {}

  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

// A reduction has nothing to reduce over (fully masked row, all targets ignored).
class DegenerateError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Caller broke a documented precondition.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Absolute position embeddings cannot address positions past their table.
class ExtrapolationError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Non-finite value surfaced during training.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace lga
