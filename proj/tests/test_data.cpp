#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "lga/data.hpp"
#include "test_util.hpp"

using namespace lga;
using namespace lga::data;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("lga_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

std::string random_utf8(std::mt19937_64& rng) {
  // Mix of ASCII and multi-byte code points, encoded by hand.
  std::uniform_int_distribution<int> len(0, 40), kind(0, 3);
  std::uniform_int_distribution<std::uint32_t> ascii(1, 0x7f), two(0x80, 0x7ff), three(0x800, 0xd7ff),
      four(0x10000, 0x10ffff);
  std::string s;
  for (int i = len(rng); i > 0; --i) {
    switch (kind(rng)) {
      case 0: s += char(ascii(rng)); break;
      case 1: {
        const auto c = two(rng);
        s += char(0xc0 | (c >> 6));
        s += char(0x80 | (c & 0x3f));
        break;
      }
      case 2: {
        const auto c = three(rng);
        s += char(0xe0 | (c >> 12));
        s += char(0x80 | ((c >> 6) & 0x3f));
        s += char(0x80 | (c & 0x3f));
        break;
      }
      default: {
        const auto c = four(rng);
        s += char(0xf0 | (c >> 18));
        s += char(0x80 | ((c >> 12) & 0x3f));
        s += char(0x80 | ((c >> 6) & 0x3f));
        s += char(0x80 | (c & 0x3f));
      }
    }
  }
  return s;
}

}  // namespace

TEST(Tokenize, Examples) {
  EXPECT_TRUE(tokenize("").empty());
  EXPECT_EQ(detokenize(std::vector<std::int32_t>{}), "");
  EXPECT_EQ(tokenize("A"), (std::vector<std::int32_t>{65}));
  EXPECT_EQ(tokenize(std::string("\xff\x00", 2)), (std::vector<std::int32_t>{255, 0}));
  EXPECT_EQ(detokenize(std::vector<std::int32_t>{kBos, 104, 105, kEos}), "hi");
  EXPECT_THROW(detokenize(std::vector<std::int32_t>{258}), IndexError);
  EXPECT_THROW(detokenize(std::vector<std::int32_t>{-1}), IndexError);
}

TEST(Tokenize, RoundTripRandomStrings) {
  auto rng = testutil::rng(1);
  for (int i = 0; i < 1000; ++i) {
    const auto s = random_utf8(rng);
    const auto ids = tokenize(s);
    EXPECT_EQ(ids.size(), s.size());
    EXPECT_EQ(detokenize(ids), s);
  }
}

TEST(Pack, SingleShortDoc) {
  const auto b = pack_documents({{"d", "abc"}}, 8, 4);
  ASSERT_EQ(b.size(), 1u);
  EXPECT_EQ(b[0].batch, 1u);
  EXPECT_EQ(b[0].tokens, (std::vector<std::int32_t>{kBos, 'a', 'b', 'c', kEos, 0, 0, 0}));
  EXPECT_EQ(b[0].mask, (std::vector<std::uint8_t>{1, 1, 1, 1, 1, 0, 0, 0}));
}

TEST(Pack, TwoDocsInOrder) {
  const auto b = pack_documents({{"1", "ab"}, {"2", "c"}}, 8, 1);
  ASSERT_EQ(b.size(), 1u);
  EXPECT_EQ(b[0].tokens, (std::vector<std::int32_t>{kBos, 'a', 'b', kEos, kBos, 'c', kEos, 0}));
}

TEST(Pack, RowsContinueDocuments) {
  const auto b = pack_documents({{"1", "abcdefg"}}, 4, 2);
  ASSERT_EQ(b.size(), 2u);
  EXPECT_EQ(b[0].batch, 2u);
  EXPECT_EQ(b[1].batch, 1u);
  EXPECT_EQ(b[0].tokens[4], 'd');  // second row resumes the document
  EXPECT_EQ(b[1].tokens, (std::vector<std::int32_t>{kEos, 0, 0, 0}));
}

TEST(Pack, MaskCrossDoc) {
  const auto b = pack_documents({{"1", "ab"}, {"2", "c"}}, 8, 1, true);
  EXPECT_EQ(b[0].mask, (std::vector<std::uint8_t>{1, 1, 1, 1, 0, 1, 1, 0}));
}

TEST(Pack, ConservesTokens) {
  auto rng = testutil::rng(2);
  std::vector<Document> docs;
  std::size_t expected = 0;
  for (int i = 0; i < 50; ++i) {
    std::string s = random_utf8(rng);
    if (s.empty()) s = "x";
    expected += s.size() + 2;
    docs.push_back({std::to_string(i), s});
  }
  for (std::size_t seq : {3u, 17u, 64u, 1000u}) {
    const auto batches = pack_documents(docs, seq, 3);
    std::size_t kept = 0, total = 0;
    std::vector<std::int32_t> stream;
    for (const auto& b : batches) {
      total += b.tokens.size();
      for (std::size_t i = 0; i < b.tokens.size(); ++i) {
        kept += b.mask[i];
        if (b.mask[i]) stream.push_back(b.tokens[i]);
      }
    }
    EXPECT_EQ(kept, expected);
    EXPECT_EQ(total, kept + (total - expected));
    EXPECT_LT(total - expected, seq);
    // Documents reappear intact and in order.
    std::vector<std::int32_t> want;
    for (const auto& d : docs) {
      want.push_back(kBos);
      const auto ids = tokenize(d.text);
      want.insert(want.end(), ids.begin(), ids.end());
      want.push_back(kEos);
    }
    EXPECT_EQ(stream, want);
  }
  EXPECT_THROW(pack_documents(docs, 2, 1), ConfigError);
}

TEST(Buckets, Boundaries) {
  EXPECT_EQ(bucket_index(1), 0u);
  EXPECT_EQ(bucket_index(128), 0u);
  EXPECT_EQ(bucket_index(129), 1u);
  EXPECT_EQ(bucket_index(256), 1u);
  EXPECT_EQ(bucket_index(257), 2u);
  const auto b = bucket_by_length({{"a", std::string(128, 'x')}, {"b", std::string(129, 'x')}}, 9);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(b[0].min_len, 1u);
  EXPECT_EQ(b[0].max_len, 128u);
  EXPECT_EQ(b[1].min_len, 129u);
  EXPECT_EQ(b[1].max_len, 256u);
  EXPECT_EQ(b[2].min_len, 257u);
  EXPECT_EQ(b[2].max_len, 512u);
  EXPECT_EQ(b[0].ids, std::vector<std::string>{"a"});
  EXPECT_EQ(b[1].ids, std::vector<std::string>{"b"});
  EXPECT_THROW(bucket_by_length({}, 6), ConfigError);
}

TEST(Buckets, Partition) {
  auto rng = testutil::rng(3);
  std::uniform_int_distribution<std::size_t> len(1, 3000);
  std::vector<Document> docs;
  for (int i = 0; i < 300; ++i) docs.push_back({std::to_string(i), std::string(len(rng), 'q')});
  const auto buckets = bucket_by_length(docs, 10);
  std::set<std::string> seen;
  std::size_t total = 0;
  for (const auto& b : buckets) {
    total += b.ids.size();
    for (const auto& id : b.ids) {
      EXPECT_TRUE(seen.insert(id).second);
      const auto n = docs[std::stoul(id)].text.size();
      EXPECT_GE(n, b.min_len);
      EXPECT_LE(n, b.max_len);
    }
  }
  EXPECT_EQ(total, docs.size());
  EXPECT_EQ(buckets.back().max_len, 4096u);  // extended past 2^10 for the longest docs
}

TEST(Readers, LinesAndDirectory) {
  const auto dir = temp_dir("readers");
  {
    std::ofstream f(dir / "lines.txt");
    f << "first doc\n\nsecond doc\r\n";
  }
  const auto lines = read_lines(dir / "lines.txt");
  ASSERT_EQ(lines.size(), 2u);
  EXPECT_EQ(lines[0].text, "first doc");
  EXPECT_EQ(lines[1].text, "second doc");
  EXPECT_NE(lines[0].id, lines[1].id);

  const auto sub = dir / "docs";
  std::filesystem::create_directories(sub);
  std::ofstream(sub / "b.txt") << "bee";
  std::ofstream(sub / "a.txt") << "ay\nmultiline";
  std::ofstream(sub / "skip.md") << "no";
  const auto docs = read_corpus(sub);
  ASSERT_EQ(docs.size(), 2u);
  EXPECT_EQ(docs[0].text, "ay\nmultiline");
  EXPECT_EQ(docs[1].text, "bee");
  EXPECT_ANY_THROW(read_lines(dir / "missing.txt"));
  std::filesystem::remove_all(dir);
}

TEST(Corpora, Synthetic) {
  const auto docs = repeated_pattern_corpus(5, 64, 200, 7);
  ASSERT_EQ(docs.size(), 5u);
  for (const auto& d : docs) {
    ASSERT_EQ(d.text.size(), 200u);
    for (std::size_t t = 64; t < 200; ++t) EXPECT_EQ(d.text[t], d.text[t - 64]);
  }
  EXPECT_EQ(repeated_pattern_corpus(5, 64, 200, 7)[3].text, docs[3].text);
  EXPECT_NE(repeated_pattern_corpus(5, 64, 200, 8)[3].text, docs[3].text);
  for (const auto& d : constant_corpus(3, 10)) EXPECT_EQ(d.text, std::string(10, 'a'));
}

TEST(Corpora, ShuffleIsSeededPermutation) {
  std::vector<Document> docs;
  for (int i = 0; i < 20; ++i) docs.push_back({std::to_string(i), "x"});
  const auto a = shuffled(docs, 1), b = shuffled(docs, 1), c = shuffled(docs, 2);
  std::vector<std::string> ia, ib, ic;
  for (std::size_t i = 0; i < 20; ++i) {
    ia.push_back(a[i].id);
    ib.push_back(b[i].id);
    ic.push_back(c[i].id);
  }
  EXPECT_EQ(ia, ib);
  EXPECT_NE(ia, ic);
  std::sort(ia.begin(), ia.end());
  std::vector<std::string> all;
  for (const auto& d : docs) all.push_back(d.id);
  std::sort(all.begin(), all.end());
  EXPECT_EQ(ia, all);
}

TEST(PackedFile, RoundTrip) {
  const auto dir = temp_dir("packed");
  const auto batches = pack_documents(repeated_pattern_corpus(6, 8, 30, 1), 16, 1, true);
  save_packed(dir / "p.bin", batches);
  const auto back = load_packed(dir / "p.bin", 4);
  std::vector<std::int32_t> t1, t2;
  std::vector<std::uint8_t> m1, m2;
  for (const auto& b : batches) {
    t1.insert(t1.end(), b.tokens.begin(), b.tokens.end());
    m1.insert(m1.end(), b.mask.begin(), b.mask.end());
  }
  for (const auto& b : back) {
    EXPECT_EQ(b.seq_len, 16u);
    t2.insert(t2.end(), b.tokens.begin(), b.tokens.end());
    m2.insert(m2.end(), b.mask.begin(), b.mask.end());
  }
  EXPECT_EQ(t1, t2);
  EXPECT_EQ(m1, m2);
  EXPECT_EQ(back.front().batch, 4u);
  std::filesystem::remove_all(dir);
}
