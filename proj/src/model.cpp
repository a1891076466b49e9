#include "lga/model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <random>
#include <sstream>

#include "lga/errors.hpp"
#include "lga/ops.hpp"
#include "lga/rng.hpp"

namespace lga::model {

std::string to_string(AttnType a) {
  switch (a) {
    case AttnType::Global:
      return "global";
    case AttnType::Local:
      return "local";
    case AttnType::GlobalApprox:
      return "global_approx";
    case AttnType::Group:
      return "group";
  }
  return "?";
}

AttnType parse_attn_type(const std::string& s) {
  if (s == "global") return AttnType::Global;
  if (s == "local") return AttnType::Local;
  if (s == "global_approx") return AttnType::GlobalApprox;
  if (s == "group") return AttnType::Group;
  throw ConfigError("attn", "expected one of global|local|global_approx|group, got '" + s + "'");
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* key) {
    if (v == 0) throw ConfigError(key, "must be >= 1");
  };
  positive(n_layers, "n_layers");
  positive(hidden_size, "hidden_size");
  positive(n_heads, "n_heads");
  positive(head_dim, "head_dim");
  positive(vocab_size, "vocab_size");
  positive(max_seq_len, "max_seq_len");
  if (hidden_size != n_heads * head_dim) {
    throw ConfigError("hidden_size", "must equal n_heads * head_dim (" + std::to_string(n_heads) + " * " +
                                         std::to_string(head_dim) + ")");
  }
  if (ff_hidden <= hidden_size) throw ConfigError("ff_hidden", "must exceed hidden_size");
  if (attn != AttnType::Global) positive(window, "window");
  if (attn == AttnType::GlobalApprox) positive(chunk, "chunk");
  if (attn == AttnType::Group && group_size == 0) throw ConfigError("group_size", "required when attn=group");
  if (pos_emb == posenc::PosEmb::Rope) rope_params().validate();
  if (pos_emb == posenc::PosEmb::Absolute && hidden_size % 2 != 0) {
    throw ConfigError("hidden_size", "absolute position embedding needs an even hidden_size");
  }
}

attention::AttnKind ModelConfig::attn_kind() const {
  switch (attn) {
    case AttnType::Global:
      return attention::GlobalKind{};
    case AttnType::Local:
      return attention::LocalKind{window};
    case AttnType::GlobalApprox:
      return attention::GlobalApproxKind{window, chunk};
    case AttnType::Group:
      return attention::GroupKind{group_size, window};
  }
  return attention::GlobalKind{};
}

attention::Compensation ModelConfig::compensation() const {
  return logit_side_compensation ? attention::Compensation::LogitSide : attention::Compensation::Literal;
}

posenc::RopeParams ModelConfig::rope_params() const { return posenc::RopeParams{rope_theta, rope_scale, head_dim}; }

namespace {

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::size_t parse_size(const KeyValues& kv, const std::string& key, std::size_t fallback) {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  std::size_t v = 0;
  const auto& s = it->second;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError(key, "expected a non-negative integer, got '" + s + "'");
  return v;
}

double parse_real(const KeyValues& kv, const std::string& key, double fallback) {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  try {
    std::size_t used = 0;
    const double v = std::stod(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError(key, "expected a number, got '" + it->second + "'");
  }
}

bool parse_bool(const KeyValues& kv, const std::string& key, bool fallback) {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  if (it->second == "true" || it->second == "1") return true;
  if (it->second == "false" || it->second == "0") return false;
  throw ConfigError(key, "expected true|false, got '" + it->second + "'");
}

}  // namespace

KeyValues ModelConfig::to_key_values() const {
  KeyValues kv;
  kv["n_layers"] = std::to_string(n_layers);
  kv["hidden_size"] = std::to_string(hidden_size);
  kv["n_heads"] = std::to_string(n_heads);
  kv["head_dim"] = std::to_string(head_dim);
  kv["ff_hidden"] = std::to_string(ff_hidden);
  kv["vocab_size"] = std::to_string(vocab_size);
  kv["max_seq_len"] = std::to_string(max_seq_len);
  kv["attn"] = to_string(attn);
  kv["window"] = std::to_string(window);
  kv["chunk"] = std::to_string(chunk);
  kv["group_size"] = std::to_string(group_size);
  kv["local_semantics"] = attention::to_string(local_semantics);
  kv["logit_side_compensation"] = logit_side_compensation ? "true" : "false";
  kv["pos_emb"] = posenc::to_string(pos_emb);
  kv["rope_theta"] = fmt_double(rope_theta);
  kv["rope_scale"] = fmt_double(rope_scale);
  kv["abs_trainable"] = abs_trainable ? "true" : "false";
  kv["seed"] = std::to_string(seed);
  return kv;
}

ModelConfig ModelConfig::from_key_values(const KeyValues& kv) {
  ModelConfig c;
  c.n_layers = parse_size(kv, "n_layers", c.n_layers);
  c.hidden_size = parse_size(kv, "hidden_size", c.hidden_size);
  c.n_heads = parse_size(kv, "n_heads", c.n_heads);
  c.head_dim = parse_size(kv, "head_dim", c.head_dim);
  c.ff_hidden = parse_size(kv, "ff_hidden", c.ff_hidden);
  c.vocab_size = parse_size(kv, "vocab_size", c.vocab_size);
  c.max_seq_len = parse_size(kv, "max_seq_len", c.max_seq_len);
  if (auto it = kv.find("attn"); it != kv.end()) c.attn = parse_attn_type(it->second);
  c.window = parse_size(kv, "window", c.window);
  c.chunk = parse_size(kv, "chunk", c.chunk);
  c.group_size = parse_size(kv, "group_size", c.group_size);
  if (auto it = kv.find("local_semantics"); it != kv.end()) {
    c.local_semantics = attention::parse_local_semantics(it->second);
  }
  c.logit_side_compensation = parse_bool(kv, "logit_side_compensation", c.logit_side_compensation);
  if (auto it = kv.find("pos_emb"); it != kv.end()) c.pos_emb = posenc::parse_pos_emb(it->second);
  c.rope_theta = parse_real(kv, "rope_theta", c.rope_theta);
  c.rope_scale = parse_real(kv, "rope_scale", c.rope_scale);
  c.abs_trainable = parse_bool(kv, "abs_trainable", c.abs_trainable);
  c.seed = parse_size(kv, "seed", c.seed);
  return c;
}

ModelConfig ModelConfig::gpt_117m() {
  ModelConfig c;
  c.n_layers = 12;
  c.hidden_size = 768;
  c.n_heads = 12;
  c.head_dim = 64;
  c.ff_hidden = 3072;
  c.vocab_size = 50257;
  c.max_seq_len = 1024;
  return c;
}

ModelConfig ModelConfig::gpt_345m() {
  ModelConfig c = gpt_117m();
  c.n_layers = 24;
  c.hidden_size = 1024;
  c.n_heads = 16;
  c.ff_hidden = 4096;
  return c;
}

LayerAttention layer_attention(const ModelConfig& config, std::size_t layer) {
  using Type = LayerAttention::Type;
  switch (config.attn) {
    case AttnType::Global:
      return {Type::Global, 0, 0};
    case AttnType::Local:
      return {Type::Local, config.window, 0};
    case AttnType::GlobalApprox:
      return {Type::GlobalApprox, config.window, config.chunk};
    case AttnType::Group:
      if (attention::layer_kind(layer, config.group_size) == attention::LayerKind::Global) return {Type::Global, 0, 0};
      return {Type::Local, config.window, 0};
  }
  return {};
}

std::vector<ParamSpec> param_specs(const ModelConfig& c) {
  using Init = ParamSpec::Init;
  const std::size_t d = c.hidden_size;
  std::vector<ParamSpec> specs;
  specs.push_back({"tok_emb", {c.vocab_size, d}, Init::Normal});
  if (c.pos_emb == posenc::PosEmb::Absolute && c.abs_trainable) {
    specs.push_back({"pos_emb", {c.max_seq_len, d}, Init::Sinusoid});
  }
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    specs.push_back({p + "ln1.g", {d}, Init::Ones});
    specs.push_back({p + "ln1.b", {d}, Init::Zeros});
    specs.push_back({p + "attn.wq", {d, d}, Init::Normal});
    specs.push_back({p + "attn.wk", {d, d}, Init::Normal});
    specs.push_back({p + "attn.wv", {d, d}, Init::Normal});
    specs.push_back({p + "attn.wo", {d, d}, Init::Normal});
    specs.push_back({p + "ln2.g", {d}, Init::Ones});
    specs.push_back({p + "ln2.b", {d}, Init::Zeros});
    specs.push_back({p + "ff.w1", {d, c.ff_hidden}, Init::Normal});
    specs.push_back({p + "ff.b1", {c.ff_hidden}, Init::Zeros});
    specs.push_back({p + "ff.w2", {c.ff_hidden, d}, Init::Normal});
    specs.push_back({p + "ff.b2", {d}, Init::Zeros});
  }
  specs.push_back({"ln_f.g", {d}, Init::Ones});
  specs.push_back({"ln_f.b", {d}, Init::Zeros});
  return specs;
}

std::size_t param_count(const ModelConfig& config) {
  std::size_t total = 0;
  for (const auto& s : param_specs(config)) total += numel(s.shape);
  return total;
}

std::size_t param_count_without_embeddings(const ModelConfig& config) {
  std::size_t total = 0;
  for (const auto& s : param_specs(config)) {
    if (s.name != "tok_emb" && s.name != "pos_emb") total += numel(s.shape);
  }
  return total;
}

template <typename T>
const Tensor<T>& Weights<T>::get(const std::string& name) const {
  return params[index_of(name)].value;
}

template <typename T>
Tensor<T>& Weights<T>::get(const std::string& name) {
  return params[index_of(name)].value;
}

template <typename T>
std::size_t Weights<T>::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name == name) return i;
  }
  throw ContractError("no parameter named '" + name + "'");
}

TokenBatch TokenBatch::single(std::vector<std::int32_t> tokens) {
  TokenBatch b;
  b.batch = 1;
  b.seq = tokens.size();
  b.tokens = std::move(tokens);
  return b;
}

template <typename T>
Model<T>::Model(ModelConfig config, Weights<T> weights) : config_(std::move(config)), weights_(std::move(weights)) {
  config_.validate();
  const auto specs = param_specs(config_);
  if (specs.size() != weights_.params.size()) {
    throw DimensionError("model: expected " + std::to_string(specs.size()) + " parameters, got " +
                         std::to_string(weights_.params.size()));
  }
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& p = weights_.params[i];
    if (p.name != specs[i].name || p.value.shape() != specs[i].shape) {
      throw DimensionError("model: parameter " + std::to_string(i) + " is '" + p.name + "' " +
                           shape_str(p.value.shape()) + ", expected '" + specs[i].name + "' " +
                           shape_str(specs[i].shape));
    }
  }
}

template <typename T>
Model<T> Model<T>::init(const ModelConfig& config) {
  config.validate();
  auto rng = make_rng(config.seed, "init_weights");
  std::normal_distribution<double> normal(0.0, 0.02);
  Weights<T> w;
  for (const auto& spec : param_specs(config)) {
    Tensor<T> t(spec.shape);
    switch (spec.init) {
      case ParamSpec::Init::Normal:
        for (auto& v : t.data()) v = static_cast<T>(normal(rng));
        break;
      case ParamSpec::Init::Zeros:
        break;
      case ParamSpec::Init::Ones:
        for (auto& v : t.data()) v = T(1);
        break;
      case ParamSpec::Init::Sinusoid:
        t = posenc::sinusoidal_table<T>(spec.shape[0], spec.shape[1]);
        break;
    }
    w.params.push_back({spec.name, std::move(t)});
  }
  return Model(config, std::move(w));
}

template <typename T>
std::vector<Var<T>> Model<T>::bind(Graph<T>& graph, bool trainable) const {
  std::vector<Var<T>> vars;
  vars.reserve(weights_.params.size());
  for (const auto& p : weights_.params) vars.push_back(trainable ? graph.parameter(p.value) : graph.constant(p.value));
  return vars;
}

template <typename T>
Var<T> Model<T>::forward(Graph<T>& graph, const std::vector<Var<T>>& params, const TokenBatch& batch) const {
  const ModelConfig& c = config_;
  const std::size_t B = batch.batch, n = batch.seq, d = c.hidden_size;
  if (n == 0 || batch.tokens.size() != B * n) {
    throw DimensionError("forward: " + std::to_string(batch.tokens.size()) + " tokens for batch " +
                         std::to_string(B) + " x " + std::to_string(n));
  }
  if (!batch.valid.empty() && batch.valid.size() != B * n) throw DimensionError("forward: validity mask size");
  if (params.size() != weights_.params.size()) throw ContractError("forward: parameter list does not match model");
  if (batch.position_offset < 0) throw IndexError("forward: negative position offset");
  std::size_t at = 0;
  auto next = [&]() { return params[at++]; };

  Var<T> tok_emb = next();
  Var<T> x = embedding(tok_emb, batch.tokens, Shape{B, n});

  std::vector<std::int64_t> positions(n);
  for (std::size_t i = 0; i < n; ++i) positions[i] = batch.position_offset + static_cast<std::int64_t>(i);

  if (c.pos_emb == posenc::PosEmb::Absolute) {
    const std::size_t off = static_cast<std::size_t>(batch.position_offset);
    if (off + n > c.max_seq_len) {
      throw ExtrapolationError("absolute position embedding covers " + std::to_string(c.max_seq_len) +
                               " positions, batch reaches " + std::to_string(off + n));
    }
    Var<T> table = c.abs_trainable ? next() : graph.constant(posenc::sinusoidal_table<T>(c.max_seq_len, d));
    if (off > 0) table = slice(table, 0, off, n);
    x = posenc::add_absolute(x, table);
  }

  attention::AttnOptions opts;
  opts.valid = batch.valid;
  if (c.pos_emb == posenc::PosEmb::Alibi) opts.alibi_slopes = posenc::AlibiParams::geometric(c.n_heads).slopes;
  const posenc::RopeParams rope = c.rope_params();

  for (std::size_t l = 0; l < c.n_layers; ++l) {
    Var<T> ln1_g = next(), ln1_b = next(), wq = next(), wk = next(), wv = next(), wo = next();
    Var<T> ln2_g = next(), ln2_b = next(), w1 = next(), b1 = next(), w2 = next(), b2 = next();

    Var<T> h = layer_norm(x, ln1_g, ln1_b);
    auto [q, k, v] = attention::qkv_project(h, wq, wk, wv, c.n_heads);
    if (c.pos_emb == posenc::PosEmb::Rope) {
      q = posenc::rope_rotate(q, positions, rope);
      k = posenc::rope_rotate(k, positions, rope);
    }
    const LayerAttention la = layer_attention(c, l);
    Var<T> ctx;
    switch (la.type) {
      case LayerAttention::Type::Global:
        ctx = attention::global_attention(q, k, v, opts);
        break;
      case LayerAttention::Type::Local:
        ctx = c.local_semantics == attention::LocalSemantics::BlockBanded
                  ? attention::local_attention_blockwise(q, k, v, la.window, opts)
                  : attention::local_attention_naive(q, k, v, la.window, attention::LocalSemantics::SlidingWindow,
                                                     opts);
        break;
      case LayerAttention::Type::GlobalApprox:
        ctx = attention::global_approx_attention(q, k, v, la.window, la.chunk, opts, c.compensation());
        break;
    }
    x = add(x, matmul(reshape(ctx, Shape{B, n, d}), wo));

    Var<T> h2 = layer_norm(x, ln2_g, ln2_b);
    Var<T> ff = gelu(add(matmul(h2, w1), b1));
    x = add(x, add(matmul(ff, w2), b2));
  }
  Var<T> ln_g = next(), ln_b = next();
  Var<T> xf = layer_norm(x, ln_g, ln_b);
  return matmul(xf, transpose(tok_emb));
}

template <typename T>
Tensor<T> Model<T>::logits(const TokenBatch& batch) const {
  Graph<T> g;
  auto params = bind(g, false);
  return forward(g, params, batch).value();
}

template <typename T>
template <typename U>
Model<U> Model<T>::cast() const {
  Weights<U> w;
  for (const auto& p : weights_.params) w.params.push_back({p.name, p.value.template cast<U>()});
  return Model<U>(config_, std::move(w));
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model,
                     const std::vector<NamedTensor<float>>& extra, const KeyValues& extra_header) {
  BlobFile blob;
  blob.header = model.config().to_key_values();
  for (const auto& [k, v] : extra_header) blob.header[k] = v;
  for (const auto& p : model.weights().params) blob.tensors.push_back({p.name, p.value.template cast<float>()});
  for (const auto& e : extra) blob.tensors.push_back(e);
  save_blob(path, blob);
}

template <typename T>
Model<T> model_from_blob(const BlobFile& blob) {
  const ModelConfig config = ModelConfig::from_key_values(blob.header);
  Weights<T> w;
  for (const auto& spec : param_specs(config)) {
    auto it = std::find_if(blob.tensors.begin(), blob.tensors.end(), [&](const auto& t) { return t.name == spec.name; });
    if (it == blob.tensors.end()) throw std::runtime_error("checkpoint is missing parameter '" + spec.name + "'");
    w.params.push_back({spec.name, it->value.template cast<T>()});
  }
  return Model<T>(config, std::move(w));
}

template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& path) {
  return model_from_blob<T>(load_blob(path));
}

template struct Weights<float>;
template struct Weights<double>;
template class Model<float>;
template class Model<double>;
template Model<double> Model<float>::cast<double>() const;
template Model<float> Model<double>::cast<float>() const;
template Model<float> Model<float>::cast<float>() const;
template Model<double> Model<double>::cast<double>() const;
template void save_checkpoint(const std::filesystem::path&, const Model<float>&, const std::vector<NamedTensor<float>>&,
                              const KeyValues&);
template void save_checkpoint(const std::filesystem::path&, const Model<double>&,
                              const std::vector<NamedTensor<float>>&, const KeyValues&);
template Model<float> load_checkpoint<float>(const std::filesystem::path&);
template Model<double> load_checkpoint<double>(const std::filesystem::path&);
template Model<float> model_from_blob<float>(const BlobFile&);
template Model<double> model_from_blob<double>(const BlobFile&);

}  // namespace lga::model
