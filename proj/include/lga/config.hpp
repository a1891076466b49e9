#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "lga/model.hpp"
#include "lga/serialize.hpp"
#include "lga/trainer.hpp"

namespace lga::config {

enum class KeyType { Int, Real, Bool, Choice, Text };

struct KeySpec {
  std::string key;
  KeyType type = KeyType::Text;
  std::string default_value;  // empty: unset
  std::string help;
  std::vector<std::string> choices;
};

/// Every recognised key, sorted by name.
const std::vector<KeySpec>& key_specs();
const KeySpec* find_key(const std::string& key);

/// Flat run configuration with every key materialized.
struct RunConfig {
  KeyValues values;

  const std::string& get(const std::string& key) const;
  std::size_t get_size(const std::string& key) const;
  double get_real(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  bool is_set(const std::string& key) const { return !get(key).empty(); }

  model::ModelConfig model() const;
  trainer::Schedule schedule() const;
  trainer::AdamConfig adam() const;

  /// Sorted key=value lines.
  std::string render() const;
};

/// Defaults, overridden by `file_text`, overridden by `flags`. Throws
/// ConfigError naming the key (and the line for file entries) on unknown
/// keys, malformed values or violated invariants.
RunConfig parse_config_text(const std::string& file_text, const std::string& source, const KeyValues& flags);
RunConfig parse_config(const std::optional<std::filesystem::path>& file, const KeyValues& flags);

/// One line per key: name, default and description.
std::string keys_help();

}  // namespace lga::config
