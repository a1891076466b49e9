#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <sstream>

#include "lga/grad_check.hpp"
#include "lga/ops.hpp"
#include "lga/serialize.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace lga;
using testutil::randn;

namespace {

Tensor<double> mat(std::size_t r, std::size_t c, std::vector<double> v) { return Tensor<double>(Shape{r, c}, v); }

}  // namespace

TEST(Matmul, IdentityAndDot) {
  Graph<double> g;
  auto eye = g.constant(mat(2, 2, {1, 0, 0, 1}));
  auto a = g.constant(mat(2, 2, {1, 2, 3, 4}));
  const Tensor<double> prod = matmul(eye, a).value();
  EXPECT_EQ(prod, a.value());
  auto r = matmul(g.constant(mat(1, 2, {1, 2})), g.constant(mat(2, 1, {3, 4})));
  EXPECT_DOUBLE_EQ(r.value().item(), 11.0);
}

TEST(Matmul, MatchesTripleLoop) {
  auto rng = testutil::rng(1);
  const auto a = randn({3, 4}, rng), b = randn({4, 5}, rng);
  Graph<double> g;
  const auto c = matmul(g.constant(a), g.constant(b)).value();
  const auto ref = oracle::matmul(oracle::to_mat(a), oracle::to_mat(b));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(c.at(i, j), ref[i][j], 1e-12);
}

TEST(Matmul, BatchedBroadcast) {
  auto rng = testutil::rng(2);
  const auto a = randn({2, 3, 4}, rng), b = randn({4, 2}, rng);
  Graph<double> g;
  const auto c = matmul(g.constant(a), g.constant(b)).value();
  ASSERT_EQ(c.shape(), (Shape{2, 3, 2}));
  for (std::size_t n = 0; n < 2; ++n) {
    Tensor<double> an(Shape{3, 4}, std::vector<double>(a.data().begin() + n * 12, a.data().begin() + (n + 1) * 12));
    const auto ref = oracle::matmul(oracle::to_mat(an), oracle::to_mat(b));
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(c.at(n, i, j), ref[i][j], 1e-12);
  }
}

TEST(Matmul, ShapeMismatchNamesShapes) {
  Graph<double> g;
  try {
    matmul(g.constant(Tensor<double>(Shape{2, 3})), g.constant(Tensor<double>(Shape{4, 2})));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4, 2]"), std::string::npos) << msg;
  }
}

TEST(Matmul, Associativity) {
  auto rng = testutil::rng(3);
  for (int draw = 0; draw < 20; ++draw) {
    const auto a = randn({5, 7}, rng), b = randn({7, 3}, rng), c = randn({3, 6}, rng);
    Graph<double> g;
    auto A = g.constant(a), B = g.constant(b), C = g.constant(c);
    EXPECT_LT(max_abs_diff(matmul(matmul(A, B), C).value(), matmul(A, matmul(B, C)).value()), 1e-8);
  }
}

TEST(SoftmaxMasked, Examples) {
  Graph<double> g;
  Mask both(Shape{2}, 1);
  auto p = softmax_masked(g.constant(Tensor<double>(Shape{2}, {0, 0})), both).value();
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);

  Mask first(Shape{2}, std::vector<std::uint8_t>{1, 0});
  p = softmax_masked(g.constant(Tensor<double>(Shape{2}, {5, 1e300})), first).value();
  EXPECT_DOUBLE_EQ(p[0], 1.0);
  EXPECT_EQ(p[1], 0.0);

  p = softmax_masked(g.constant(Tensor<double>(Shape{3}, {1, 2, 3})), Mask(Shape{3}, 1)).value();
  const auto ref = oracle::softmax({1, 2, 3}, {true, true, true});
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(p[i], ref[i], 1e-12);
}

TEST(SoftmaxMasked, RowsSumToOne) {
  auto rng = testutil::rng(4);
  for (int draw = 0; draw < 50; ++draw) {
    const auto x = randn({6, 9}, rng, 5.0);
    Mask m(Shape{6, 9});
    const auto keep = testutil::random_valid(54, rng, 0.5);
    for (std::size_t i = 0; i < 54; ++i) m[i] = keep[i];
    for (std::size_t r = 0; r < 6; ++r) m.at(r, r) = 1;
    Graph<double> g;
    const auto p = softmax_masked(g.constant(x), m).value();
    for (std::size_t r = 0; r < 6; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < 9; ++c) {
        if (!m.at(r, c)) {
          EXPECT_EQ(p.at(r, c), 0.0);
        }
        s += p.at(r, c);
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(SoftmaxMasked, FullyMaskedRowThrows) {
  Graph<double> g;
  EXPECT_THROW(softmax_masked(g.constant(Tensor<double>(Shape{2, 2})), Mask(Shape{2, 2},
                                                                              std::vector<std::uint8_t>{1, 0, 0, 0})),
               DegenerateError);
}

TEST(CrossEntropy, UniformIsLogV) {
  Graph<double> g;
  const std::vector<std::int32_t> t{0, 3, 6};
  const auto loss = cross_entropy(g.constant(Tensor<double>(Shape{1, 3, 7}, 0.25)), t).value().item();
  EXPECT_NEAR(loss, std::log(7.0), 1e-12);
}

TEST(CrossEntropy, MarginMonotone) {
  double prev = INFINITY;
  for (double margin : {0.0, 1.0, 2.0, 5.0, 10.0, 20.0}) {
    Graph<double> g;
    Tensor<double> logits(Shape{1, 1, 4});
    logits[2] = margin;
    const std::vector<std::int32_t> t{2};
    const double loss = cross_entropy(g.constant(logits), t).value().item();
    EXPECT_TRUE(std::isfinite(loss));
    EXPECT_GT(loss, 0.0);
    EXPECT_LT(loss, prev);
    prev = loss;
  }
}

TEST(CrossEntropy, MatchesScalarLoopWithIgnore) {
  auto rng = testutil::rng(5);
  const auto x = randn({2, 3, 5}, rng);
  const std::vector<std::int32_t> t{1, 4, 0, 2, 2, 3};
  const std::vector<std::uint8_t> keep{1, 1, 0, 1, 1, 1};
  Graph<double> g;
  const double loss = cross_entropy(g.constant(x), t, keep).value().item();
  double ref = 0;
  int count = 0;
  for (std::size_t r = 0; r < 6; ++r) {
    if (!keep[r]) continue;
    double z = 0;
    for (std::size_t v = 0; v < 5; ++v) z += std::exp(x[r * 5 + v]);
    ref += std::log(z) - x[r * 5 + std::size_t(t[r])];
    ++count;
  }
  EXPECT_NEAR(loss, ref / count, 1e-12);
}

TEST(CrossEntropy, Errors) {
  Graph<double> g;
  auto x = g.constant(Tensor<double>(Shape{1, 2, 3}));
  const std::vector<std::int32_t> bad{0, 3}, ok{0, 1};
  EXPECT_THROW(cross_entropy(x, bad), IndexError);
  const std::vector<std::uint8_t> none{0, 0};
  EXPECT_THROW(cross_entropy(x, ok, none), DegenerateError);
}

TEST(Backward, Examples) {
  Graph<double> g;
  auto x = g.parameter(Tensor<double>(Shape{2, 3}, 0.7));
  g.backward(sum(x));
  for (double v : x.grad().data()) EXPECT_EQ(v, 1.0);

  Graph<double> g2;
  auto y = g2.parameter(Tensor<double>(Shape{2}, {1, 2}));
  g2.backward(sum(mul(y, y)));
  EXPECT_DOUBLE_EQ(y.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(y.grad()[1], 4.0);
}

TEST(Backward, NonScalarLossThrows) {
  Graph<double> g;
  auto x = g.parameter(Tensor<double>(Shape{2}));
  EXPECT_THROW(g.backward(x), ContractError);
}

TEST(GradCheck, Polynomial) {
  const auto r = grad_check([](Graph<double>&, const std::vector<Var<double>>& p) { return sum(mul(p[0], p[0])); },
                            {{"p", Tensor<double>::scalar(3.0)}});
  EXPECT_LT(r.max_rel_error(), 1e-9);
  EXPECT_TRUE(r.all_pass());
}

TEST(GradCheck, SoftmaxThenPick) {
  auto rng = testutil::rng(6);
  const auto logits = randn({7}, rng);
  Tensor<double> pick(Shape{7});
  pick[3] = 1;
  const auto r = grad_check(
      [&](Graph<double>& g, const std::vector<Var<double>>& p) {
        return sum(mul(softmax_masked(p[0], Mask(Shape{7}, 1)), g.constant(pick)));
      },
      {{"logits", logits}});
  EXPECT_LT(r.max_rel_error(), 1e-6);
}

// Every differentiable primitive on three shapes.
class OpGrad : public ::testing::TestWithParam<int> {};

TEST_P(OpGrad, AllPrimitives) {
  const std::vector<Shape> shapes = {{2, 3}, {3, 4}, {2, 3, 5}};
  const Shape s = shapes[std::size_t(GetParam())];
  auto rng = testutil::rng(100 + GetParam());
  const std::size_t last = s.back(), rows = numel(s) / last;
  const auto a = randn(s, rng), b = randn(s, rng), w = randn(s, rng);
  const auto right = randn({last, 4}, rng);
  const auto gain = randn({last}, rng), bias = randn({last}, rng);
  const auto table = randn({6, last}, rng);
  std::vector<std::int32_t> ids(rows);
  for (std::size_t i = 0; i < rows; ++i) ids[i] = std::int32_t((i * 5 + 1) % 6);
  Mask m(s, 1);
  for (std::size_t i = 0; i < m.size(); i += 3) m[i] = i % last == 0 ? 1 : 0;
  std::vector<std::int32_t> targets(rows);
  for (std::size_t i = 0; i < rows; ++i) targets[i] = std::int32_t(i % last);
  Shape lead(s.begin(), s.end() - 1);

  using VP = const std::vector<Var<double>>&;
  using Fn = std::function<Var<double>(Graph<double>&, const std::vector<Var<double>>&)>;
  // Weighted sums so the loss is sensitive to every output element.
  auto wsum = [&](Graph<double>& g, Var<double> x) {
    const auto& xs = x.value();
    Tensor<double> c(xs.shape());
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = std::sin(0.37 * double(i) + 0.1);
    return sum(mul(x, g.constant(c)));
  };
  const std::vector<std::pair<std::string, Fn>> cases = {
      {"add", [&](Graph<double>& g, VP p) { return wsum(g, add(p[0], p[1])); }},
      {"sub", [&](Graph<double>& g, VP p) { return wsum(g, sub(p[0], p[1])); }},
      {"mul", [&](Graph<double>& g, VP p) { return wsum(g, mul(p[0], p[1])); }},
      {"scale", [&](Graph<double>& g, VP p) { return wsum(g, scale(p[0], 1.7)); }},
      {"matmul", [&](Graph<double>& g, VP p) { return wsum(g, matmul(p[0], g.parameter(right))); }},
      {"transpose", [&](Graph<double>& g, VP p) { return wsum(g, transpose(p[0])); }},
      {"reshape", [&](Graph<double>& g, VP p) { return wsum(g, reshape(p[0], Shape{numel(s)})); }},
      {"concat", [&](Graph<double>& g, VP p) { return wsum(g, concat(std::vector<Var<double>>{p[0], p[1]}, s.size() - 1)); }},
      {"pad", [&](Graph<double>& g, VP p) { return wsum(g, pad(p[0], 0, 1, 2)); }},
      {"slice", [&](Graph<double>& g, VP p) { return wsum(g, slice(p[0], s.size() - 1, 1, last - 1)); }},
      {"layer_norm", [&](Graph<double>& g, VP p) {
         return wsum(g, layer_norm(p[0], g.constant(gain), g.constant(bias)));
       }},
      {"gelu", [&](Graph<double>& g, VP p) { return wsum(g, gelu(p[0])); }},
      {"softmax", [&](Graph<double>& g, VP p) { return wsum(g, softmax_masked(p[0], m)); }},
      {"cross_entropy", [&](Graph<double>&, VP p) { return cross_entropy(p[0], targets); }},
      {"mean", [&](Graph<double>&, VP p) { return mean(mul(p[0], p[1])); }},
      {"embedding", [&](Graph<double>& g, VP p) {
         return wsum(g, add(embedding(g.parameter(table), ids, lead), p[0]));
       }},
  };
  for (const auto& [name, fn] : cases) {
    const auto r = grad_check(fn, {{"a", a}, {"b", b}});
    EXPECT_LT(r.max_rel_error(), 1e-4) << name << " shape " << shape_str(s);
  }
  // Parameters created inside the builder are not perturbed; check them directly.
  const auto rm = grad_check(
      [&](Graph<double>& g, const std::vector<Var<double>>& p) { return wsum(g, matmul(g.constant(a), p[0])); },
      {{"right", right}});
  EXPECT_LT(rm.max_rel_error(), 1e-4);
  const auto re = grad_check(
      [&](Graph<double>& g, const std::vector<Var<double>>& p) { return wsum(g, embedding(p[0], ids, lead)); },
      {{"table", table}});
  EXPECT_LT(re.max_rel_error(), 1e-4);
  const auto rl = grad_check(
      [&](Graph<double>& g, const std::vector<Var<double>>& p) {
        return wsum(g, layer_norm(g.constant(w), p[0], p[1]));
      },
      {{"gain", gain}, {"bias", bias}});
  EXPECT_LT(rl.max_rel_error(), 1e-4);
  const auto rp = grad_check(
      [&](Graph<double>& g, const std::vector<Var<double>>& p) {
        return wsum(g, permute(p[0], s.size() == 3 ? std::vector<std::size_t>{2, 0, 1} : std::vector<std::size_t>{1, 0}));
      },
      {{"a", a}});
  EXPECT_LT(rp.max_rel_error(), 1e-4);
}

INSTANTIATE_TEST_SUITE_P(Shapes, OpGrad, ::testing::Values(0, 1, 2));

TEST(Primitives, MatchLoopOracles) {
  auto rng = testutil::rng(7);
  const auto x = randn({3, 4}, rng), y = randn({3, 4}, rng);
  Graph<double> g;
  auto X = g.constant(x), Y = g.constant(y);
  const auto s = add(X, Y).value(), m = mul(X, Y).value(), d = sub(X, Y).value(), k = scale(X, 2.5).value();
  for (std::size_t i = 0; i < 12; ++i) {
    EXPECT_EQ(s[i], x[i] + y[i]);
    EXPECT_EQ(m[i], x[i] * y[i]);
    EXPECT_EQ(d[i], x[i] - y[i]);
    EXPECT_EQ(k[i], x[i] * 2.5);
  }
  const auto t = transpose(X).value();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(t.at(j, i), x.at(i, j));
  const auto c = concat(std::vector<Var<double>>{X, Y}, 0).value();
  EXPECT_EQ(c.at(4, 2), y.at(1, 2));
  const auto p = pad(X, 1, 1, 2).value();
  ASSERT_EQ(p.shape(), (Shape{3, 7}));
  EXPECT_EQ(p.at(1, 0), 0.0);
  EXPECT_EQ(p.at(1, 3), x.at(1, 2));
  EXPECT_EQ(p.at(1, 6), 0.0);
  const auto sl = slice(X, 1, 1, 2).value();
  EXPECT_EQ(sl.at(2, 1), x.at(2, 2));

  const auto gl = gelu(X).value();
  for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(gl[i], oracle::ScalarModel::gelu(x[i]), 1e-14);

  const Tensor<double> gain(Shape{4}, {1, 2, 3, 4}), bias(Shape{4}, {0, 1, 0, -1});
  const auto ln = layer_norm(X, g.constant(gain), g.constant(bias)).value();
  for (std::size_t r = 0; r < 3; ++r) {
    std::vector<double> row(x.data().begin() + r * 4, x.data().begin() + r * 4 + 4);
    const auto ref = oracle::ScalarModel::layer_norm(row, gain, bias);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(ln.at(r, j), ref[j], 1e-12);
  }

  const std::vector<std::int32_t> ids{2, 0, 2};
  const auto e = embedding(X, ids, Shape{3}).value();
  for (std::size_t j = 0; j < 4; ++j) {
    EXPECT_EQ(e.at(0, j), x.at(2, j));
    EXPECT_EQ(e.at(1, j), x.at(0, j));
  }
}

TEST(Primitives, EmbeddingScatterAddsRepeatedIds) {
  Graph<double> g;
  auto table = g.parameter(Tensor<double>(Shape{3, 2}));
  const std::vector<std::int32_t> ids{1, 1, 2};
  g.backward(sum(embedding(table, ids, Shape{3})));
  EXPECT_EQ(table.grad().at(0, 0), 0.0);
  EXPECT_EQ(table.grad().at(1, 0), 2.0);
  EXPECT_EQ(table.grad().at(2, 1), 1.0);
  EXPECT_THROW(embedding(table, std::vector<std::int32_t>{3}, Shape{1}), IndexError);
}

TEST(Primitives, RoundTripsBitExact) {
  auto rng = testutil::rng(8);
  const auto x = randn({2, 3, 4}, rng);
  Graph<double> g;
  auto X = g.constant(x);
  EXPECT_EQ(reshape(reshape(X, Shape{4, 6}), Shape{2, 3, 4}).value(), x);
  EXPECT_EQ(transpose(transpose(X)).value(), x);
  EXPECT_EQ(permute(permute(X, {2, 0, 1}), {1, 2, 0}).value(), x);
}

TEST(Tensor, Invariants) {
  EXPECT_THROW(Tensor<double>(Shape{2, 0}), DimensionError);
  EXPECT_THROW(Tensor<double>(Shape{2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  EXPECT_EQ(Tensor<double>(Shape{}).shape(), (Shape{1}));
  Graph<double> g;
  EXPECT_THROW(reshape(g.constant(Tensor<double>(Shape{2, 3})), Shape{4}), DimensionError);
}

TEST(Serialize, BlobRoundTripBitExact) {
  auto rng = testutil::rng(9);
  BlobFile f;
  f.header = {{"b", "2"}, {"a", "x y"}};
  f.tensors.push_back({"w", lga::random_normal<float>(Shape{3, 5}, rng)});
  f.tensors.push_back({"v", Tensor<float>(Shape{7}, -0.0f)});
  std::stringstream ss;
  write_blob(ss, f);
  const auto back = read_blob(ss);
  EXPECT_EQ(back.header, f.header);
  ASSERT_EQ(back.tensors.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back.tensors[i].name, f.tensors[i].name);
    EXPECT_EQ(back.tensors[i].value.shape(), f.tensors[i].value.shape());
    EXPECT_EQ(std::memcmp(back.tensors[i].value.data().data(), f.tensors[i].value.data().data(),
                          f.tensors[i].value.size() * sizeof(float)),
              0);
  }
}

TEST(Serialize, RejectsBadMagic) {
  std::stringstream ss("NOPE!....");
  EXPECT_ANY_THROW(read_blob(ss));
}

TEST(Serialize, KeyValues) {
  const KeyValues kv{{"z", "1"}, {"a", "two"}};
  EXPECT_EQ(render_key_values(kv), "a=two\nz=1\n");
  EXPECT_EQ(parse_key_values("# c\n\na=two\nz = 1\n"), kv);
  EXPECT_THROW(parse_key_values("novalue\n"), ConfigError);
}
