#include "lga/checks.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "lga/attention.hpp"
#include "lga/errors.hpp"
#include "lga/grad_check.hpp"
#include "lga/inference.hpp"
#include "lga/ops.hpp"
#include "lga/posenc.hpp"
#include "lga/rng.hpp"

namespace lga::checks {

namespace {

using model::AttnType;
using model::ModelConfig;
using model::Model;

std::vector<std::uint8_t> random_valid(std::size_t n, std::mt19937_64& rng) {
  std::bernoulli_distribution keep(0.8);
  std::vector<std::uint8_t> v(n);
  for (auto& x : v) x = keep(rng) ? 1 : 0;
  return v;
}

std::vector<std::int32_t> random_tokens(std::size_t n, std::size_t vocab, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::int32_t> pick(0, static_cast<std::int32_t>(vocab) - 1);
  std::vector<std::int32_t> t(n);
  for (auto& x : t) x = pick(rng);
  return t;
}

ModelConfig small_config(AttnType attn, posenc::PosEmb pe) {
  ModelConfig c;
  c.n_layers = 2;
  c.hidden_size = 16;
  c.n_heads = 2;
  c.head_dim = 8;
  c.ff_hidden = 32;
  c.vocab_size = 32;
  c.max_seq_len = 64;
  c.attn = attn;
  c.window = 4;
  c.chunk = 2;
  c.group_size = 2;
  c.pos_emb = pe;
  return c;
}

Model<double> random_model(const ModelConfig& c, std::mt19937_64& rng) {
  auto m = Model<double>::init(c);
  randomize_weights(m, rng);
  return m;
}

Model<double> with_config(const Model<double>& m, const ModelConfig& c) { return Model<double>(c, m.weights()); }

CheckResult result(std::string suite, std::string name, double diff, double tol) {
  return {std::move(suite), std::move(name), diff, tol, diff <= tol};
}

std::vector<CheckResult> blockwise_suite(std::mt19937_64& rng) {
  std::vector<CheckResult> out;
  for (std::size_t w : {1, 4, 16}) {
    std::set<std::size_t> ns = {1, w - 1, w, w + 1, 2 * w, 2 * w + 1, 7 * w + 3};
    ns.erase(0);
    double worst = 0;
    for (std::size_t n : ns) {
      for (int draw = 0; draw < 3; ++draw) {
        const Shape s{2, n, 2, 4};
        attention::AttnOptions opts;
        opts.valid = random_valid(2 * n, rng);
        if (draw == 2) opts.alibi_slopes = posenc::AlibiParams::geometric(2).slopes;
        Graph<double> g;
        auto q = g.constant(random_normal<double>(s, rng));
        auto k = g.constant(random_normal<double>(s, rng));
        auto v = g.constant(random_normal<double>(s, rng));
        auto a = attention::local_attention_blockwise(q, k, v, w, opts);
        auto b = attention::local_attention_naive(q, k, v, w, attention::LocalSemantics::BlockBanded, opts);
        worst = std::max(worst, max_abs_diff(a.value(), b.value()));
      }
    }
    out.push_back(result("blockwise", "w=" + std::to_string(w), worst, 1e-12));
  }
  return out;
}

std::vector<CheckResult> ga_suite(std::mt19937_64& rng) {
  std::vector<CheckResult> out;
  for (std::size_t n : {8, 40, 100}) {
    const Shape s{1, n, 2, 4};
    Graph<double> g;
    auto q = g.constant(random_normal<double>(s, rng));
    auto k = g.constant(random_normal<double>(s, rng));
    auto v = g.constant(random_normal<double>(s, rng));
    auto a = attention::global_approx_attention(q, k, v, 8, 1);
    auto b = attention::global_attention(q, k, v);
    out.push_back(result("ga", "c=1 n=" + std::to_string(n), max_abs_diff(a.value(), b.value()), 1e-10));
  }
  return out;
}

std::vector<CheckResult> group_suite(std::mt19937_64& rng) {
  ModelConfig c = small_config(AttnType::Global, posenc::PosEmb::Rope);
  c.n_layers = 4;
  const auto global = random_model(c, rng);
  const auto batch = model::TokenBatch::single(random_tokens(24, c.vocab_size, rng));
  const auto ref = global.logits(batch);

  ModelConfig g1 = c;
  g1.attn = AttnType::Group;
  g1.group_size = 1;
  ModelConfig g4 = g1;
  g4.group_size = 4;
  g4.window = 32;
  return {result("group", "L=1", max_abs_diff(with_config(global, g1).logits(batch), ref), 1e-10),
          result("group", "L=4 w>=n", max_abs_diff(with_config(global, g4).logits(batch), ref), 1e-10)};
}

std::vector<CheckResult> rope_suite(std::mt19937_64& rng) {
  std::vector<CheckResult> out;
  ModelConfig c = small_config(AttnType::Global, posenc::PosEmb::Rope);
  const auto m = random_model(c, rng);
  auto batch = model::TokenBatch::single(random_tokens(12, c.vocab_size, rng));
  const auto ref = m.logits(batch);
  for (std::int64_t s : {1, 100, 4096}) {
    batch.position_offset = s;
    out.push_back(result("rope", "shift " + std::to_string(s), max_abs_diff(m.logits(batch), ref), 1e-6));
  }
  posenc::RopeParams unit{posenc::kDefaultRopeTheta, 1.0, 32};
  posenc::RopeParams scaled{posenc::kDefaultRopeTheta, 4.0, 32};
  double worst = 0;
  for (int p = 0; p < 20000; p += 7) {
    for (std::size_t i = 0; i < 16; ++i) {
      worst = std::max(worst, std::abs(posenc::rope_angle(p, i, scaled) - posenc::rope_angle(p / 4.0, i, unit)));
    }
  }
  out.push_back(result("rope", "scale=4 angles", worst, 0.0));
  return out;
}

// Causal softmax rows of scores + bias.
Tensor<double> causal_rows(const Tensor<double>& scores, const Tensor<double>& bias) {
  const std::size_t n = scores.dim(1);
  Mask mask(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) mask.at(i, j) = 1;
  }
  Graph<double> g;
  return softmax_masked(add(g.constant(scores), g.constant(bias)), mask).value();
}

std::vector<CheckResult> alibi_suite(std::mt19937_64& rng) {
  std::vector<CheckResult> out;
  const std::size_t H = 4, n = 16;
  const auto params = posenc::AlibiParams::geometric(H);
  const auto scores = random_normal<double>(Shape{H, n, n}, rng);
  std::vector<std::int64_t> pos(n);
  for (std::size_t i = 0; i < n; ++i) pos[i] = static_cast<std::int64_t>(i);
  const auto ref = causal_rows(scores, posenc::alibi_bias<double>(params, pos, pos));
  for (std::int64_t s : {1, 100, 4096}) {
    std::vector<std::int64_t> shifted(pos);
    for (auto& p : shifted) p += s;
    double worst = max_abs_diff(causal_rows(scores, posenc::alibi_bias<double>(params, shifted, shifted)), ref);
    worst = std::max(worst, max_abs_diff(causal_rows(scores, posenc::alibi_key_bias<double>(params, n, shifted)), ref));
    out.push_back(result("alibi", "shift " + std::to_string(s), worst, 1e-12));
  }
  return out;
}

std::vector<CheckResult> cache_suite(std::mt19937_64& rng) {
  std::vector<CheckResult> out;
  for (AttnType kind : {AttnType::Global, AttnType::Local, AttnType::GlobalApprox, AttnType::Group}) {
    ModelConfig c = small_config(kind, posenc::PosEmb::Rope);
    c.local_semantics = attention::LocalSemantics::SlidingWindow;
    const auto m = random_model(c, rng);
    const auto tokens = random_tokens(4 * c.window, c.vocab_size, rng);
    inference::DecodeSession<double> session(m);
    double worst = 0;
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      const auto step = session.decode_step(tokens[t]);
      const auto full =
          m.logits(model::TokenBatch::single(std::vector<std::int32_t>(tokens.begin(), tokens.begin() + t + 1)));
      for (std::size_t v = 0; v < c.vocab_size; ++v) {
        worst = std::max(worst, std::abs(step[v] - full[t * c.vocab_size + v]));
      }
    }
    out.push_back(result("cache", model::to_string(kind), worst, 1e-10));
  }
  return out;
}

std::vector<CheckResult> grad_suite(std::mt19937_64& rng) {
  std::vector<CheckResult> out;
  for (AttnType kind : {AttnType::Global, AttnType::Local, AttnType::GlobalApprox, AttnType::Group}) {
    for (auto pe : {posenc::PosEmb::Absolute, posenc::PosEmb::Alibi, posenc::PosEmb::Rope}) {
      ModelConfig c = small_config(kind, pe);
      c.hidden_size = 8;
      c.head_dim = 4;
      c.ff_hidden = 16;
      c.vocab_size = 16;
      c.window = 2;
      c.max_seq_len = 8;
      const auto m = random_model(c, rng);
      const auto tokens = random_tokens(8, c.vocab_size, rng);
      const auto batch = model::TokenBatch::single(std::vector<std::int32_t>(tokens.begin(), tokens.end() - 1));
      const std::vector<std::int32_t> targets(tokens.begin() + 1, tokens.end());
      const auto report = grad_check(
          [&](Graph<double>& g, const std::vector<Var<double>>& p) {
            return cross_entropy(m.forward(g, p, batch), targets);
          },
          m.weights().params);
      out.push_back(
          result("grad", model::to_string(kind) + "/" + posenc::to_string(pe), report.max_rel_error(), 1e-4));
    }
  }
  return out;
}

}  // namespace

void randomize_weights(model::Model<double>& m, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> small(0.0, 0.1);
  for (const auto& spec : model::param_specs(m.config())) {
    auto& t = m.weights().get(spec.name);
    switch (spec.init) {
      case model::ParamSpec::Init::Normal:
      case model::ParamSpec::Init::Sinusoid:
        t = random_normal<double>(t.shape(), rng, scale);
        break;
      case model::ParamSpec::Init::Ones:
        for (auto& v : t.data()) v = 1.0 + small(rng);
        break;
      case model::ParamSpec::Init::Zeros:
        for (auto& v : t.data()) v = small(rng);
        break;
    }
  }
}

const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names = {"blockwise", "ga", "group", "rope", "alibi", "cache", "grad"};
  return names;
}

std::vector<CheckResult> run_checks(const std::vector<std::string>& suites, std::uint64_t seed) {
  for (const auto& s : suites) {
    if (std::find(suite_names().begin(), suite_names().end(), s) == suite_names().end()) {
      throw ConfigError("suite", "unknown check suite '" + s + "'");
    }
  }
  std::vector<CheckResult> out;
  for (const auto& name : suite_names()) {
    if (!suites.empty() && std::find(suites.begin(), suites.end(), name) == suites.end()) continue;
    auto rng = make_rng(seed, "check/" + name);
    std::vector<CheckResult> r;
    if (name == "blockwise") r = blockwise_suite(rng);
    if (name == "ga") r = ga_suite(rng);
    if (name == "group") r = group_suite(rng);
    if (name == "rope") r = rope_suite(rng);
    if (name == "alibi") r = alibi_suite(rng);
    if (name == "cache") r = cache_suite(rng);
    if (name == "grad") r = grad_suite(rng);
    out.insert(out.end(), r.begin(), r.end());
  }
  return out;
}

std::string report_csv(const std::vector<CheckResult>& results) {
  std::ostringstream os;
  os.precision(6);
  os << "suite,check,max_diff,tolerance,status\n";
  for (const auto& r : results) {
    os << r.suite << ',' << r.name << ',' << r.max_diff << ',' << r.tolerance << ',' << (r.pass ? "PASS" : "FAIL")
       << '\n';
  }
  return os.str();
}

}  // namespace lga::checks
