#include "lga/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "lga/errors.hpp"

namespace lga::config {

namespace {

std::vector<KeySpec> build_specs() {
  using K = KeyType;
  std::vector<KeySpec> s = {
      {"abs_trainable", K::Bool, "true", "absolute position table is a trained parameter", {}},
      {"attn", K::Choice, "global", "attention strategy", {"global", "local", "global_approx", "group"}},
      {"batch_size", K::Int, "8", "rows per training batch", {}},
      {"beta1", K::Real, "0.9", "Adam first-moment decay", {}},
      {"beta2", K::Real, "0.99", "Adam second-moment decay", {}},
      {"checkpoint", K::Text, "model.ckpt", "checkpoint path (written by train, read by eval/generate)", {}},
      {"chunk", K::Int, "16", "global-approximation chunk size", {}},
      {"clip", K::Real, "1.0", "global gradient-norm clip (0 disables)", {}},
      {"eps", K::Real, "1e-08", "Adam epsilon", {}},
      {"eval_data", K::Text, "", "evaluation corpus (lines file or directory of .txt)", {}},
      {"ff_hidden", K::Int, "512", "feed-forward hidden width", {}},
      {"group_size", K::Int, "", "layers per group; required when attn=group", {}},
      {"head_dim", K::Int, "32", "per-head key/value width", {}},
      {"hidden_size", K::Int, "128", "model width (n_heads * head_dim)", {}},
      {"local_semantics", K::Choice, "block_banded", "local window semantics in training", {"block_banded", "sliding_window"}},
      {"log_every", K::Int, "10", "metrics log interval in steps", {}},
      {"logit_side_compensation", K::Bool, "false", "chunk summaries use means plus ln(count) on the logit", {}},
      {"mask_cross_doc", K::Bool, "false", "exclude cross-document predictions from the loss", {}},
      {"max_exponent", K::Int, "14", "largest evaluation bucket is 2^max_exponent tokens", {}},
      {"max_lr", K::Real, "0.001", "peak learning rate", {}},
      {"metrics_log", K::Text, "", "CSV path for step,lr,loss (stdout when empty)", {}},
      {"min_lr", K::Real, "1e-05", "final learning rate", {}},
      {"n_heads", K::Int, "4", "attention heads", {}},
      {"n_layers", K::Int, "4", "transformer layers", {}},
      {"pos_emb", K::Choice, "rope", "positional embedding", {"absolute", "alibi", "rope"}},
      {"rope_scale", K::Real, "1", "rotary position interpolation factor", {}},
      {"rope_theta", K::Real, "131072", "rotary frequency base", {}},
      {"seed", K::Int, "0", "root seed for all randomness", {}},
      {"seq_len", K::Int, "256", "training sequence length (also the absolute table size)", {}},
      {"steps", K::Int, "2000", "training steps", {}},
      {"train_data", K::Text, "", "training corpus or packed file", {}},
      {"vocab_size", K::Int, "258", "vocabulary size (bytes + BOS + EOS)", {}},
      {"warmup_steps", K::Int, "2000", "linear warmup steps", {}},
      {"weight_decay", K::Real, "0.01", "decoupled weight decay on matrices", {}},
      {"window", K::Int, "64", "local attention window", {}},
  };
  std::sort(s.begin(), s.end(), [](const KeySpec& a, const KeySpec& b) { return a.key < b.key; });
  return s;
}

void check_value(const KeySpec& spec, const std::string& value, const std::string& where) {
  const auto fail = [&](const std::string& what) {
    throw ConfigError(spec.key, (where.empty() ? "" : where + ": ") + what + ", got '" + value + "'");
  };
  if (value.empty()) {
    if (!spec.default_value.empty()) fail("value required");
    return;
  }
  switch (spec.type) {
    case KeyType::Int: {
      std::uint64_t v = 0;
      auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
      if (ec != std::errc() || p != value.data() + value.size()) fail("expected a non-negative integer");
      break;
    }
    case KeyType::Real: {
      try {
        std::size_t used = 0;
        const double v = std::stod(value, &used);
        if (used != value.size() || !std::isfinite(v)) fail("expected a finite number");
      } catch (const std::logic_error&) {
        fail("expected a number");
      }
      break;
    }
    case KeyType::Bool:
      if (value != "true" && value != "false") fail("expected true|false");
      break;
    case KeyType::Choice:
      if (std::find(spec.choices.begin(), spec.choices.end(), value) == spec.choices.end()) {
        std::string all;
        for (const auto& c : spec.choices) all += (all.empty() ? "" : "|") + c;
        fail("expected one of " + all);
      }
      break;
    case KeyType::Text:
      break;
  }
}

}  // namespace

const std::vector<KeySpec>& key_specs() {
  static const std::vector<KeySpec> specs = build_specs();
  return specs;
}

const KeySpec* find_key(const std::string& key) {
  for (const auto& s : key_specs()) {
    if (s.key == key) return &s;
  }
  return nullptr;
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values.find(key);
  if (it == values.end()) throw ConfigError(key, "unknown key");
  return it->second;
}

std::size_t RunConfig::get_size(const std::string& key) const {
  const std::string& v = get(key);
  if (v.empty()) throw ConfigError(key, "not set");
  return std::stoull(v);
}

double RunConfig::get_real(const std::string& key) const { return std::stod(get(key)); }

bool RunConfig::get_bool(const std::string& key) const { return get(key) == "true"; }

model::ModelConfig RunConfig::model() const {
  KeyValues kv = values;
  kv["max_seq_len"] = get("seq_len");
  if (kv["group_size"].empty()) kv.erase("group_size");
  return model::ModelConfig::from_key_values(kv);
}

trainer::Schedule RunConfig::schedule() const {
  trainer::Schedule s;
  s.max_lr = get_real("max_lr");
  s.min_lr = get_real("min_lr");
  s.warmup = get_size("warmup_steps");
  s.total = get_size("steps");
  return s;
}

trainer::AdamConfig RunConfig::adam() const {
  trainer::AdamConfig a;
  a.beta1 = get_real("beta1");
  a.beta2 = get_real("beta2");
  a.eps = get_real("eps");
  a.weight_decay = get_real("weight_decay");
  a.clip = get_real("clip");
  return a;
}

std::string RunConfig::render() const { return render_key_values(values); }

RunConfig parse_config_text(const std::string& file_text, const std::string& source, const KeyValues& flags) {
  RunConfig cfg;
  for (const auto& s : key_specs()) cfg.values[s.key] = s.default_value;

  std::map<std::string, std::size_t> lines;
  const KeyValues file = parse_key_values(file_text, source, &lines);
  for (const auto& [k, v] : file) {
    const std::string where = source + ":" + std::to_string(lines[k]);
    const KeySpec* spec = find_key(k);
    if (!spec) throw ConfigError(k, where + ": unknown key");
    check_value(*spec, v, where);
    cfg.values[k] = v;
  }
  for (const auto& [k, v] : flags) {
    const KeySpec* spec = find_key(k);
    if (!spec) throw ConfigError(k, "unknown key");
    check_value(*spec, v, "");
    cfg.values[k] = v;
  }

  const model::ModelConfig m = cfg.model();
  m.validate();
  const trainer::Schedule sched = cfg.schedule();
  if (sched.warmup > sched.total) throw ConfigError("warmup_steps", "must not exceed steps");
  sched.validate();
  if (cfg.get_size("seq_len") < 3) throw ConfigError("seq_len", "must be >= 3");
  if (cfg.get_size("batch_size") == 0) throw ConfigError("batch_size", "must be >= 1");
  const double b1 = cfg.get_real("beta1"), b2 = cfg.get_real("beta2");
  if (!(b1 >= 0 && b1 < 1)) throw ConfigError("beta1", "must lie in [0, 1)");
  if (!(b2 >= 0 && b2 < 1)) throw ConfigError("beta2", "must lie in [0, 1)");
  if (cfg.get_size("max_exponent") < 7) throw ConfigError("max_exponent", "must be >= 7");
  return cfg;
}

RunConfig parse_config(const std::optional<std::filesystem::path>& file, const KeyValues& flags) {
  std::string text;
  std::string source = "<flags>";
  if (file) {
    std::ifstream in(*file);
    if (!in) throw ConfigError("config", "cannot read " + file->string());
    std::ostringstream ss;
    ss << in.rdbuf();
    text = ss.str();
    source = file->string();
  }
  return parse_config_text(text, source, flags);
}

std::string keys_help() {
  std::ostringstream os;
  os << "Config keys (key=value in --config file, or --<key> <value>):\n";
  for (const auto& s : key_specs()) {
    std::string name = "  " + s.key;
    name.resize(std::max<std::size_t>(name.size() + 1, 28), ' ');
    os << name << "default: " << (s.default_value.empty() ? "(unset)" : s.default_value) << "  " << s.help << '\n';
  }
  return os.str();
}

}  // namespace lga::config
