#include "lga/data.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <sstream>

#include "lga/errors.hpp"
#include "lga/rng.hpp"
#include "lga/serialize.hpp"

namespace lga::data {

std::vector<std::int32_t> tokenize(std::string_view text) {
  std::vector<std::int32_t> ids(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) ids[i] = static_cast<unsigned char>(text[i]);
  return ids;
}

std::string detokenize(std::span<const std::int32_t> ids) {
  std::string out;
  out.reserve(ids.size());
  for (auto id : ids) {
    if (id == kBos || id == kEos) continue;
    if (id < 0 || id > 255) throw IndexError("detokenize: id " + std::to_string(id) + " outside vocab");
    out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return out;
}

std::vector<PackedBatch> pack_documents(const std::vector<Document>& docs, std::size_t seq_len,
                                        std::size_t rows_per_batch, bool mask_cross_doc) {
  if (seq_len < 3) throw ConfigError("seq_len", "must be >= 3 for packing");
  if (rows_per_batch == 0) throw ConfigError("batch_size", "must be >= 1");
  std::vector<std::int32_t> stream;
  std::vector<std::uint8_t> keep;
  for (const auto& d : docs) {
    // A BOS opening a row is kept: nothing before it in the row belongs to
    // another document.
    stream.push_back(kBos);
    keep.push_back(1);
    const auto ids = tokenize(d.text);
    stream.insert(stream.end(), ids.begin(), ids.end());
    keep.insert(keep.end(), ids.size() + 1, 1);
    stream.push_back(kEos);
  }
  const std::size_t rows = (stream.size() + seq_len - 1) / seq_len;
  std::vector<PackedBatch> out;
  for (std::size_t r0 = 0; r0 < rows; r0 += rows_per_batch) {
    PackedBatch b;
    b.batch = std::min(rows_per_batch, rows - r0);
    b.seq_len = seq_len;
    b.tokens.assign(b.batch * seq_len, 0);
    b.mask.assign(b.batch * seq_len, 0);
    for (std::size_t r = 0; r < b.batch; ++r) {
      for (std::size_t t = 0; t < seq_len; ++t) {
        const std::size_t s = (r0 + r) * seq_len + t;
        if (s >= stream.size()) break;
        b.tokens[r * seq_len + t] = stream[s];
        const bool crosses = mask_cross_doc && stream[s] == kBos && t > 0;
        b.mask[r * seq_len + t] = keep[s] && !crosses ? 1 : 0;
      }
    }
    out.push_back(std::move(b));
  }
  return out;
}

std::size_t bucket_index(std::size_t length) {
  std::size_t idx = 0;
  for (std::size_t hi = 128; length > hi; hi *= 2) ++idx;
  return idx;
}

std::vector<LengthBucket> bucket_by_length(const std::vector<Document>& docs, unsigned max_exponent) {
  if (max_exponent < 7) throw ConfigError("max_exponent", "must be >= 7 (first bucket is [1,128])");
  std::size_t n_buckets = max_exponent - 6;
  for (const auto& d : docs) n_buckets = std::max(n_buckets, bucket_index(d.text.size()) + 1);
  std::vector<LengthBucket> buckets(n_buckets);
  std::size_t hi = 128;
  for (std::size_t b = 0; b < n_buckets; ++b, hi *= 2) {
    buckets[b].min_len = b == 0 ? 1 : hi / 2 + 1;
    buckets[b].max_len = hi;
  }
  for (const auto& d : docs) buckets[bucket_index(d.text.size())].ids.push_back(d.id);
  return buckets;
}

std::vector<Document> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open corpus file " + path.string());
  std::vector<Document> docs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    docs.push_back({path.filename().string() + ":" + std::to_string(lineno), line});
  }
  return docs;
}

std::vector<Document> read_directory(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".txt") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<Document> docs;
  for (const auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    if (ss.str().empty()) continue;
    docs.push_back({f.filename().string(), ss.str()});
  }
  return docs;
}

std::vector<Document> read_corpus(const std::filesystem::path& path) {
  if (std::filesystem::is_directory(path)) return read_directory(path);
  return read_lines(path);
}

std::vector<Document> shuffled(std::vector<Document> docs, std::uint64_t seed) {
  auto rng = make_rng(seed, "shuffle_documents");
  std::shuffle(docs.begin(), docs.end(), rng);
  return docs;
}

std::vector<Document> repeated_pattern_corpus(std::size_t n_docs, std::size_t pattern_len, std::size_t doc_len,
                                              std::uint64_t seed, std::string_view alphabet) {
  if (pattern_len == 0 || alphabet.empty()) throw ConfigError("pattern_len", "must be >= 1");
  auto rng = make_rng(seed, "repeated_pattern_corpus");
  std::uniform_int_distribution<std::size_t> pick(0, alphabet.size() - 1);
  std::vector<Document> docs;
  for (std::size_t i = 0; i < n_docs; ++i) {
    std::string pattern(pattern_len, ' ');
    for (auto& ch : pattern) ch = alphabet[pick(rng)];
    std::string text(doc_len, ' ');
    for (std::size_t t = 0; t < doc_len; ++t) text[t] = pattern[t % pattern_len];
    docs.push_back({"pattern" + std::to_string(i), std::move(text)});
  }
  return docs;
}

std::vector<Document> constant_corpus(std::size_t n_docs, std::size_t doc_len, char byte) {
  std::vector<Document> docs;
  for (std::size_t i = 0; i < n_docs; ++i) docs.push_back({"const" + std::to_string(i), std::string(doc_len, byte)});
  return docs;
}

void save_packed(const std::filesystem::path& path, const std::vector<PackedBatch>& batches) {
  if (batches.empty()) throw ContractError("save_packed: nothing to save");
  const std::size_t seq = batches.front().seq_len;
  std::vector<float> tokens, mask;
  std::size_t rows = 0;
  for (const auto& b : batches) {
    if (b.seq_len != seq) throw DimensionError("save_packed: mixed sequence lengths");
    for (auto t : b.tokens) tokens.push_back(static_cast<float>(t));
    for (auto m : b.mask) mask.push_back(static_cast<float>(m));
    rows += b.batch;
  }
  BlobFile blob;
  blob.header["kind"] = "packed";
  blob.header["rows"] = std::to_string(rows);
  blob.header["seq_len"] = std::to_string(seq);
  blob.tensors.push_back({"tokens", Tensor<float>(Shape{rows, seq}, std::move(tokens))});
  blob.tensors.push_back({"mask", Tensor<float>(Shape{rows, seq}, std::move(mask))});
  save_blob(path, blob);
}

std::vector<PackedBatch> load_packed(const std::filesystem::path& path, std::size_t rows_per_batch) {
  if (rows_per_batch == 0) throw ConfigError("batch_size", "must be >= 1");
  const BlobFile blob = load_blob(path);
  const Tensor<float>* tokens = nullptr;
  const Tensor<float>* mask = nullptr;
  for (const auto& t : blob.tensors) {
    if (t.name == "tokens") tokens = &t.value;
    if (t.name == "mask") mask = &t.value;
  }
  if (!tokens || !mask || tokens->rank() != 2 || tokens->shape() != mask->shape()) {
    throw std::runtime_error(path.string() + ": not a packed data file");
  }
  const std::size_t rows = tokens->dim(0), seq = tokens->dim(1);
  std::vector<PackedBatch> out;
  for (std::size_t r0 = 0; r0 < rows; r0 += rows_per_batch) {
    PackedBatch b;
    b.batch = std::min(rows_per_batch, rows - r0);
    b.seq_len = seq;
    for (std::size_t i = r0 * seq; i < (r0 + b.batch) * seq; ++i) {
      b.tokens.push_back(static_cast<std::int32_t>((*tokens)[i]));
      b.mask.push_back(static_cast<std::uint8_t>((*mask)[i]));
    }
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace lga::data
