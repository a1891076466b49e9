#include <gtest/gtest.h>

#include <sstream>

#include "lga/attention.hpp"
#include "lga/complexity.hpp"
#include "test_util.hpp"

using namespace lga;
using namespace lga::complexity;
using model::AttnType;

namespace {

const std::vector<AttnType> kKinds = {AttnType::Global, AttnType::Local, AttnType::GlobalApprox, AttnType::Group};

}  // namespace

TEST(AttnCost, LeadingOrderFormulas) {
  const CostModel m{768, 16384, 512, 16, 4};
  EXPECT_EQ(attn_cost(AttnType::Global, m), 768.0 * 16384 * 16384);
  EXPECT_EQ(attn_cost(AttnType::Local, m), 768.0 * 512 * 16384);
  EXPECT_EQ(attn_cost(AttnType::GlobalApprox, m), 768.0 / 256 * 16384 * 16384 + 768.0 * 512 * 16384);
  EXPECT_EQ(attn_cost(AttnType::Group, m) / attn_cost(AttnType::Global, m), 0.28125);
  EXPECT_EQ(attn_cost(AttnType::Group, m) / attn_cost(AttnType::Global, m), 1.0 / m.L + m.W / m.N);
}

TEST(AttnCost, DegenerateGroupIsGlobal) {
  const CostModel m{768, 4096, 0, 16, 1};
  EXPECT_EQ(attn_cost(AttnType::Group, m), attn_cost(AttnType::Global, m));
}

TEST(AttnCost, OrderingOnGrid) {
  for (double L : {2.0, 3.0, 4.0, 8.0})
    for (double W : {16.0, 512.0, 1024.0})
      for (double N = 64; N <= 131072; N *= 2) {
        const CostModel m{256, N, W, 16, L};
        if (N <= W * L / (L - 1)) continue;
        EXPECT_LT(attn_cost(AttnType::Local, m), attn_cost(AttnType::Group, m));
        EXPECT_LT(attn_cost(AttnType::Group, m), attn_cost(AttnType::Global, m)) << "N=" << N << " W=" << W;
      }
}

TEST(AttnCost, GroupRatioTendsToOneOverL) {
  for (double L : {2.0, 3.0, 4.0}) {
    const CostModel m{768, 1000 * 512, 512, 16, L};
    const double ratio = attn_cost(AttnType::Group, m) / attn_cost(AttnType::Global, m);
    EXPECT_NEAR(ratio, 1.0 / L, 0.01 / L);
  }
}

TEST(AttnCost, InvalidModel) {
  EXPECT_THROW(attn_cost(AttnType::Global, CostModel{0, 10, 1, 1, 1}), ConfigError);
  EXPECT_THROW(attn_cost(AttnType::Group, CostModel{8, 10, 1, 1, 0}), ConfigError);
}

TEST(TotalCost, Totals) {
  const CostModel m{768, 4096, 512, 16, 4};
  const double D = m.D, N = m.N, W = m.W;
  EXPECT_EQ(total_cost(AttnType::Global, m), D * N * N + D * D * N);
  EXPECT_DOUBLE_EQ(total_cost(AttnType::Group, m), D / m.L * N * N + D * (D + W) * N);
  EXPECT_DOUBLE_EQ(total_cost(AttnType::Local, m), D * (D + W) * N);
}

TEST(TotalCost, ShortSequencesDominatedByProjections) {
  const CostModel m{4096, 8, 4, 2, 4};
  for (auto k : kKinds) EXPECT_NEAR(total_cost(k, m) / total_cost(AttnType::Global, m), 1.0, 0.01);
}

TEST(Sweep, SortedAndMonotone) {
  const CostModel base{768, 0 + 1, 1024, 16, 3};
  const auto rows = sweep(base, {16384, 1024, 4096}, {AttnType::Group, AttnType::Global});
  ASSERT_EQ(rows.size(), 6u);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    EXPECT_LE(std::tie(rows[i - 1].kind, rows[i - 1].N), std::tie(rows[i].kind, rows[i].N));
    if (rows[i].kind == rows[i - 1].kind) {
      EXPECT_GT(rows[i].attn_ops, rows[i - 1].attn_ops);
      EXPECT_GT(rows[i].total_ops, rows[i - 1].total_ops);
    }
  }
  // Group rows follow the global ones alphabetically; at N = W the window
  // saturates and there is no saving.
  EXPECT_EQ(rows[3].kind, "group");
  EXPECT_GE(rows[3].ratio_vs_global, 1.0);
  EXPECT_LT(rows[5].ratio_vs_global, 0.5);
  EXPECT_EQ(rows[0].ratio_vs_global, 1.0);
}

TEST(Sweep, SinglePointAndCsv) {
  const auto rows = sweep(CostModel{}, {1024}, {AttnType::Local});
  ASSERT_EQ(rows.size(), 1u);
  const auto csv = to_csv(rows);
  std::istringstream in(csv);
  std::string header, line;
  std::getline(in, header);
  std::getline(in, line);
  EXPECT_EQ(header, "kind,N,attn_ops,total_ops,ratio_vs_global");
  EXPECT_EQ(line.substr(0, 11), "local,1024,");
  EXPECT_THROW(sweep(CostModel{}, {}, {AttnType::Local}), ConfigError);
}

TEST(Sweep, BlockBandedRows) {
  const CostModel m{64, 4096, 128, 16, 4};
  const auto rows = sweep(m, {4096}, {AttnType::Local, AttnType::Group}, true);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0].kind, "group");
  EXPECT_EQ(rows[1].kind, "group_block_banded");
  EXPECT_EQ(rows[3].kind, "local_block_banded");
  EXPECT_EQ(rows[3].attn_ops, 2 * rows[2].attn_ops);
}

TEST(Instrumented, MacCountsMatchCalibratedFormula) {
  // One forward pass per (kind, N); MACs counted inside the attention kernels.
  for (auto sem : {attention::LocalSemantics::SlidingWindow, attention::LocalSemantics::BlockBanded}) {
    for (auto kind : kKinds) {
      for (std::size_t n : {64u, 256u, 1024u}) {
        auto c = testutil::tiny_config(kind);
        c.n_layers = 2;
        c.window = 8;
        c.chunk = 4;
        c.group_size = 2;
        c.max_seq_len = n;
        c.local_semantics = sem;
        const auto m = model::Model<double>::init(c);
        auto rng = testutil::rng(n);
        attention::reset_mac_count();
        m.logits(model::TokenBatch::single(testutil::random_tokens(n, c.vocab_size, rng)));
        const double measured = double(attention::mac_count());
        const CostModel cm{double(c.hidden_size), double(n), double(c.window), double(c.chunk), double(c.group_size)};
        const double predicted = double(c.n_layers) * calibrated_attn_macs(kind, cm, sem);
        EXPECT_NEAR(measured / predicted, 1.0, 0.10)
            << model::to_string(kind) << " " << attention::to_string(sem) << " N=" << n;
      }
    }
  }
}
