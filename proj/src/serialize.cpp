#include "lga/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "lga/errors.hpp"

namespace lga {

std::string render_key_values(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename U>
void put(std::ostream& os, U v) {
  static_assert(std::is_unsigned_v<U>);
  unsigned char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <typename U>
U get(std::istream& is) {
  unsigned char buf[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(U))) throw std::runtime_error("blob: unexpected end of file");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  return v;
}

std::string get_bytes(std::istream& is, std::size_t n) {
  std::string s(n, '\0');
  if (n && !is.read(s.data(), static_cast<std::streamsize>(n))) throw std::runtime_error("blob: truncated string");
  return s;
}

}  // namespace

KeyValues parse_key_values(const std::string& text, const std::string& source,
                           std::map<std::string, std::size_t>* lines) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key=value, got '" + t + "'");
    }
    const std::string key = trim(t.substr(0, eq));
    if (key.empty()) throw ConfigError(source + ":" + std::to_string(lineno) + ": empty key");
    kv[key] = trim(t.substr(eq + 1));
    if (lines) (*lines)[key] = lineno;
  }
  return kv;
}

void write_blob(std::ostream& os, const BlobFile& file) {
  os.write(kBlobMagic, 5);
  const std::string header = render_key_values(file.header);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(header.size()));
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(file.tensors.size()));
  for (const auto& t : file.tensors) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.value.rank()));
    for (auto d : t.value.shape()) put<std::uint64_t>(os, d);
    std::string buf(t.value.size() * 4, '\0');
    std::size_t at = 0;
    for (float v : t.value.data()) {
      const auto u = std::bit_cast<std::uint32_t>(v);
      for (int b = 0; b < 4; ++b) buf[at++] = static_cast<char>(u >> (8 * b));
    }
    os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  }
  if (!os) throw std::runtime_error("blob: write failed");
}

BlobFile read_blob(std::istream& is) {
  const std::string magic = get_bytes(is, 5);
  if (magic != kBlobMagic) throw std::runtime_error("blob: bad magic '" + magic + "'");
  BlobFile file;
  file.header = parse_key_values(get_bytes(is, get<std::uint32_t>(is)), "blob header");
  const auto count = get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor<float> t;
    t.name = get_bytes(is, get<std::uint32_t>(is));
    const auto rank = get<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(get<std::uint64_t>(is));
    if (rank == 0 || rank > 8) throw std::runtime_error("blob: tensor '" + t.name + "' has rank " + std::to_string(rank));
    for (auto d : shape) {
      if (d == 0) throw std::runtime_error("blob: tensor '" + t.name + "' has a zero dimension");
    }
    const std::string raw = get_bytes(is, numel(shape) * 4);
    std::vector<float> data(numel(shape));
    for (std::size_t j = 0; j < data.size(); ++j) {
      std::uint32_t u = 0;
      for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(raw[j * 4 + b])) << (8 * b);
      data[j] = std::bit_cast<float>(u);
    }
    t.value = Tensor<float>(std::move(shape), std::move(data));
    file.tensors.push_back(std::move(t));
  }
  return file;
}

void save_blob(const std::filesystem::path& path, const BlobFile& file) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_blob(os, file);
}

BlobFile load_blob(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  return read_blob(is);
}

}  // namespace lga
