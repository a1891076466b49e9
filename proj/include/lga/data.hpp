#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace lga::data {

inline constexpr std::int32_t kBos = 256;
inline constexpr std::int32_t kEos = 257;
inline constexpr std::int32_t kVocab = 258;

struct Document {
  std::string id;
  std::string text;
};

/// Byte b -> id b.
std::vector<std::int32_t> tokenize(std::string_view text);
/// Inverse of tokenize; BOS and EOS are dropped.
std::string detokenize(std::span<const std::int32_t> ids);

/// [batch, seq_len] tokens. mask[t] is 1 for real tokens, 0 for padding and,
/// with cross-document masking, for each BOS that follows an earlier
/// document in the same row.
struct PackedBatch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<std::int32_t> tokens;
  std::vector<std::uint8_t> mask;
};

/// BOS doc EOS BOS doc EOS ... cut into rows of seq_len, grouped into
/// batches of up to `rows_per_batch` rows. Only the final row is padded.
std::vector<PackedBatch> pack_documents(const std::vector<Document>& docs, std::size_t seq_len,
                                        std::size_t rows_per_batch, bool mask_cross_doc = false);

struct LengthBucket {
  std::size_t min_len = 0;
  std::size_t max_len = 0;
  std::vector<std::string> ids;
};

/// [1,128], [129,256], ... up to [2^(e-1)+1, 2^e]; further doubling
/// buckets are appended while documents remain longer than the last one.
/// Length is the document's token count.
std::vector<LengthBucket> bucket_by_length(const std::vector<Document>& docs, unsigned max_exponent);

/// Index of the bucket holding a document of `length` tokens.
std::size_t bucket_index(std::size_t length);

/// One document per line (ids "<file>:<line>"), blank lines skipped.
std::vector<Document> read_lines(const std::filesystem::path& path);
/// One document per *.txt file, in filename order.
std::vector<Document> read_directory(const std::filesystem::path& dir);
/// read_directory for directories, read_lines otherwise.
std::vector<Document> read_corpus(const std::filesystem::path& path);

std::vector<Document> shuffled(std::vector<Document> docs, std::uint64_t seed);

/// Documents of `doc_len` bytes, each repeating its own random pattern of
/// `pattern_len` bytes drawn from `alphabet`.
std::vector<Document> repeated_pattern_corpus(std::size_t n_docs, std::size_t pattern_len, std::size_t doc_len,
                                              std::uint64_t seed, std::string_view alphabet = "abcdefghijklmnopqrstuvwxyz");

/// Documents consisting of one repeated byte.
std::vector<Document> constant_corpus(std::size_t n_docs, std::size_t doc_len, char byte = 'a');

void save_packed(const std::filesystem::path& path, const std::vector<PackedBatch>& batches);
/// Rows of a packed file regrouped into batches of up to rows_per_batch.
std::vector<PackedBatch> load_packed(const std::filesystem::path& path, std::size_t rows_per_batch);

}  // namespace lga::data
