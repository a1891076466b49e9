#include <gtest/gtest.h>

#include <cmath>

#include "lga/inference.hpp"
#include "test_util.hpp"

using namespace lga;
using namespace lga::inference;
using model::AttnType;
using model::Model;
using model::ModelConfig;
using model::TokenBatch;
using posenc::PosEmb;

namespace {

ModelConfig sliding(AttnType kind, PosEmb pe) {
  auto c = testutil::tiny_config(kind, pe);
  c.local_semantics = attention::LocalSemantics::SlidingWindow;
  return c;
}

template <typename T>
double last_row_diff(const Tensor<T>& step, const Tensor<T>& full, std::size_t t, std::size_t vocab) {
  double d = 0;
  for (std::size_t v = 0; v < vocab; ++v)
    d = std::max(d, std::abs(double(step[v]) - double(full[t * vocab + v])));
  return d;
}

}  // namespace

TEST(LayerCache, GlobalGrows) {
  LayerCache<double> c(CacheKind::Global, 2);
  for (int p = 0; p < 5; ++p) {
    const std::vector<double> k{double(p), 0}, v{0, double(p)};
    c.append(p, k, v);
    EXPECT_EQ(c.size(), std::size_t(p + 1));
  }
  EXPECT_EQ(c.key(3)[0], 3.0);
  EXPECT_EQ(c.value(4)[1], 4.0);
  EXPECT_THROW(c.position(5), IndexError);
  EXPECT_THROW(c.append(5, std::vector<double>{1}, std::vector<double>{1, 2}), DimensionError);
}

TEST(LayerCache, LocalRingIsFifo) {
  LayerCache<double> c(CacheKind::Local, 1, 3);
  for (int p = 0; p < 10; ++p) {
    c.append(p, std::vector<double>{double(p)}, std::vector<double>{-double(p)});
    EXPECT_EQ(c.size(), std::min<std::size_t>(p + 1, 3));
    const auto pos = c.positions();
    for (std::size_t e = 0; e < pos.size(); ++e) {
      EXPECT_EQ(pos[e], p + 1 - std::int64_t(pos.size()) + std::int64_t(e));
      EXPECT_EQ(c.key(e)[0], double(pos[e]));
    }
  }
  EXPECT_THROW(LayerCache<double>(CacheKind::Local, 1, 0), ConfigError);
}

TEST(Prefill, CacheSizes) {
  auto c = sliding(AttnType::Group, PosEmb::Rope);
  const auto m = testutil::random_model(c);
  {
    DecodeSession<double> s(m);
    s.prefill(std::vector<std::int32_t>{3});
    for (std::size_t l = 0; l < s.n_layers(); ++l) EXPECT_EQ(s.cache(l).size(), 1u);
  }
  DecodeSession<double> s(m);
  auto rng = testutil::rng(1);
  s.prefill(testutil::random_tokens(c.window + 5, c.vocab_size, rng));
  EXPECT_EQ(s.cache(0).size(), c.window + 5);
  ASSERT_EQ(s.cache(1).kind(), CacheKind::Local);
  ASSERT_EQ(s.cache(1).size(), c.window);
  for (std::size_t e = 0; e < c.window; ++e) EXPECT_EQ(s.cache(1).position(e), std::int64_t(5 + e));
}

TEST(Prefill, Errors) {
  const auto m = testutil::random_model(sliding(AttnType::Global, PosEmb::Rope));
  DecodeSession<double> s(m);
  EXPECT_THROW(s.prefill(std::vector<std::int32_t>{}), ContractError);
  s.prefill(std::vector<std::int32_t>{1, 2});
  EXPECT_THROW(s.prefill(std::vector<std::int32_t>{1}), ContractError);
  EXPECT_THROW(s.decode_step(11), IndexError);
}

TEST(Prefill, LastLogitsMatchFullForward) {
  auto rng = testutil::rng(2);
  for (auto kind : {AttnType::Global, AttnType::Local, AttnType::GlobalApprox, AttnType::Group}) {
    const auto c = sliding(kind, PosEmb::Rope);
    const auto md = testutil::random_model(c);
    const auto mf = md.cast<float>();
    const auto prompt = testutil::random_tokens(3 * c.window + 2, c.vocab_size, rng);
    DecodeSession<float> s(mf);
    const auto last = s.prefill(prompt);
    const auto full = mf.logits(TokenBatch::single(prompt));
    EXPECT_LT(last_row_diff(last, full, prompt.size() - 1, c.vocab_size), 1e-5) << model::to_string(kind);
  }
}

TEST(Decode, MatchesFullForwardEveryStep) {
  auto rng = testutil::rng(3);
  for (auto kind : {AttnType::Global, AttnType::Local, AttnType::GlobalApprox, AttnType::Group}) {
    for (auto pe : {PosEmb::Absolute, PosEmb::Alibi, PosEmb::Rope}) {
      for (bool logit_side : {false, true}) {
        if (logit_side && kind != AttnType::GlobalApprox) continue;
        auto c = sliding(kind, pe);
        c.logit_side_compensation = logit_side;
        const auto md = testutil::random_model(c, 4);
        const auto mf = md.cast<float>();
        const auto tokens = testutil::random_tokens(4 * c.window, c.vocab_size, rng);
        DecodeSession<double> sd(md);
        DecodeSession<float> sf(mf);
        double worst_d = 0, worst_f = 0;
        const auto full_d = md.logits(TokenBatch::single(tokens));
        const auto full_f = mf.logits(TokenBatch::single(tokens));
        for (std::size_t t = 0; t < tokens.size(); ++t) {
          // Causality makes the prefix rows of the full forward the oracle for every step.
          worst_d = std::max(worst_d, last_row_diff(sd.decode_step(tokens[t]), full_d, t, c.vocab_size));
          worst_f = std::max(worst_f, last_row_diff(sf.decode_step(tokens[t]), full_f, t, c.vocab_size));
        }
        EXPECT_LT(worst_d, 1e-10) << model::to_string(kind) << "/" << posenc::to_string(pe);
        EXPECT_LT(worst_f, 1e-5) << model::to_string(kind) << "/" << posenc::to_string(pe);
      }
    }
  }
}

TEST(Decode, AfterPrefillMatchesFullForward) {
  const auto c = sliding(AttnType::Group, PosEmb::Rope);
  const auto m = testutil::random_model(c);
  auto rng = testutil::rng(5);
  auto tokens = testutil::random_tokens(13, c.vocab_size, rng);
  DecodeSession<double> s(m);
  s.prefill(std::span(tokens.data(), 12));
  const auto step = s.decode_step(tokens[12]);
  EXPECT_LT(last_row_diff(step, m.logits(TokenBatch::single(tokens)), 12, c.vocab_size), 1e-10);
  EXPECT_EQ(s.tokens_decoded(), 13u);
}

TEST(Decode, DeterministicAndBookkeeping) {
  const auto c = sliding(AttnType::Group, PosEmb::Alibi);
  const auto m = testutil::random_model(c);
  DecodeSession<double> a(m), b(m);
  auto rng = testutil::rng(6);
  const auto tokens = testutil::random_tokens(20, c.vocab_size, rng);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    EXPECT_EQ(a.decode_step(tokens[t]), b.decode_step(tokens[t]));
    EXPECT_EQ(a.cache(0).size(), t + 1);
    EXPECT_EQ(a.cache(1).size(), std::min(t + 1, c.window));
  }
}

TEST(Decode, RopeScaleHonoured) {
  auto c = sliding(AttnType::Local, PosEmb::Rope);
  c.rope_scale = 4;
  const auto m = testutil::random_model(c);
  auto rng = testutil::rng(7);
  const auto tokens = testutil::random_tokens(12, c.vocab_size, rng);
  DecodeSession<double> s(m);
  const auto last = s.prefill(tokens);
  EXPECT_LT(last_row_diff(last, m.logits(TokenBatch::single(tokens)), 11, c.vocab_size), 1e-10);
}

TEST(Generate, Argmax) {
  const std::vector<double> x{1, 3, 3, 2};
  EXPECT_EQ(argmax<double>(x), 1u);
  EXPECT_THROW(argmax<double>(std::vector<double>{}), DimensionError);
}

TEST(Generate, ForcedTokenRepeats) {
  auto c = sliding(AttnType::Group, PosEmb::Rope);
  auto m = testutil::random_model(c);
  // Final norm outputs the constant bias; the tied head then scores token v
  // by the row sum of its embedding.
  for (auto& g : m.weights().get("ln_f.g").data()) g = 0;
  for (auto& b : m.weights().get("ln_f.b").data()) b = 1;
  auto& emb = m.weights().get("tok_emb");
  for (std::size_t e = 0; e < c.hidden_size; ++e) emb.at(7, e) = 5.0;
  DecodeSession<double> s(m);
  const auto out = generate(s, std::vector<std::int32_t>{1, 2, 3}, 6);
  EXPECT_EQ(out, std::vector<std::int32_t>(6, 7));
}

TEST(Generate, PrefixProperty) {
  const auto c = sliding(AttnType::GlobalApprox, PosEmb::Rope);
  const auto m = testutil::random_model(c);
  const std::vector<std::int32_t> prompt{4, 1, 9, 2};
  std::vector<std::int32_t> prev;
  for (std::size_t k = 1; k <= 8; ++k) {
    DecodeSession<double> s(m);
    const auto out = generate(s, prompt, k);
    ASSERT_EQ(out.size(), k);
    EXPECT_TRUE(std::equal(prev.begin(), prev.end(), out.begin()));
    prev = out;
  }
  DecodeSession<double> s(m);
  EXPECT_THROW(generate(s, prompt, 0), ContractError);
}

TEST(CacheMemory, Formula) {
  ModelConfig g;
  g.n_layers = 4;
  g.window = 512;
  ModelConfig grp = g;
  grp.attn = AttnType::Group;
  grp.group_size = 4;
  const std::size_t n = 32768;
  EXPECT_EQ(cache_memory(g, n), 2u * 4 * n * g.hidden_size * 4);
  const double ratio = double(cache_memory(grp, n)) / double(cache_memory(g, n));
  EXPECT_DOUBLE_EQ(ratio, 0.25 + 0.75 * 512.0 / 32768.0);
  EXPECT_NEAR(ratio, 0.2617, 5e-5);
  for (std::size_t m : {1u, 100u, 512u}) EXPECT_EQ(cache_memory(grp, m), cache_memory(g, m));
  for (std::size_t m : {513u, 1000u, 100000u}) EXPECT_LT(cache_memory(grp, m), cache_memory(g, m));
}

TEST(CacheMemory, WindowBounds) {
  ModelConfig c = testutil::tiny_config(AttnType::Local);
  c.window = 1;
  EXPECT_EQ(cache_entries(c, 50), c.n_layers);
  c.window = 0;
  EXPECT_THROW(cache_entries(c, 5), ConfigError);
}

TEST(CacheMemory, MatchesSessionCounts) {
  auto c = sliding(AttnType::Group, PosEmb::Rope);
  c.n_layers = 4;
  c.group_size = 2;
  const auto m = testutil::random_model(c);
  DecodeSession<double> s(m);
  for (std::size_t t = 0; t < 3 * c.window; ++t) {
    s.decode_step(std::int32_t(t % c.vocab_size));
    std::size_t entries = 0;
    for (std::size_t l = 0; l < s.n_layers(); ++l) entries += s.cache(l).size();
    EXPECT_EQ(entries, cache_entries(c, t + 1));
  }
}
