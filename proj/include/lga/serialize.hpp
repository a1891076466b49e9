#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "lga/tensor.hpp"

namespace lga {

inline constexpr char kBlobMagic[] = "ZBRA1";

/// Flat key=value metadata. std::map keeps keys sorted, which makes the
/// rendered text canonical.
using KeyValues = std::map<std::string, std::string>;

std::string render_key_values(const KeyValues& kv);
/// Parses "key=value" lines; blank lines and '#' comments are skipped.
/// Throws ConfigError naming the line on malformed input. When `lines` is
/// given it receives the line each key was read from.
KeyValues parse_key_values(const std::string& text, const std::string& source = "<text>",
                           std::map<std::string, std::size_t>* lines = nullptr);

struct BlobFile {
  KeyValues header;
  std::vector<NamedTensor<float>> tensors;
};

// Layout (all integers little-endian):
//   "ZBRA1"
//   u32 header length, header bytes (canonical key=value text)
//   u32 tensor count
//   per tensor: u32 name length, name bytes, u32 rank, u64 dims[rank],
//               f32 values[prod(dims)]
void write_blob(std::ostream& os, const BlobFile& file);
BlobFile read_blob(std::istream& is);
void save_blob(const std::filesystem::path& path, const BlobFile& file);
BlobFile load_blob(const std::filesystem::path& path);

}  // namespace lga
