#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lga/attention.hpp"
#include "lga/graph.hpp"
#include "lga/posenc.hpp"
#include "lga/serialize.hpp"
#include "lga/tensor.hpp"

namespace lga::model {

enum class AttnType { Global, Local, GlobalApprox, Group };

std::string to_string(AttnType a);
AttnType parse_attn_type(const std::string& s);

inline constexpr std::int32_t kByteVocab = 258;

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t hidden_size = 128;
  std::size_t n_heads = 4;
  std::size_t head_dim = 32;  // K-V channel
  std::size_t ff_hidden = 512;
  std::size_t vocab_size = kByteVocab;
  std::size_t max_seq_len = 256;

  AttnType attn = AttnType::Global;
  std::size_t window = 64;
  std::size_t chunk = 16;
  std::size_t group_size = 0;  // required when attn == Group
  attention::LocalSemantics local_semantics = attention::LocalSemantics::BlockBanded;
  bool logit_side_compensation = false;

  posenc::PosEmb pos_emb = posenc::PosEmb::Rope;
  double rope_theta = posenc::kDefaultRopeTheta;
  double rope_scale = 1.0;
  bool abs_trainable = true;

  std::uint64_t seed = 0;

  /// Throws ConfigError naming the first offending key.
  void validate() const;

  attention::AttnKind attn_kind() const;
  attention::Compensation compensation() const;
  posenc::RopeParams rope_params() const;

  KeyValues to_key_values() const;
  /// Reads model keys from kv; keys absent from kv keep their defaults and
  /// unrelated keys are ignored.
  static ModelConfig from_key_values(const KeyValues& kv);

  /// Preset shapes ("117M": 12 x 768, "345M": 24 x 1024) with a 50257 vocab.
  static ModelConfig gpt_117m();
  static ModelConfig gpt_345m();
};

/// What a single layer's attention computes.
struct LayerAttention {
  enum class Type { Global, Local, GlobalApprox };
  Type type = Type::Global;
  std::size_t window = 0;
  std::size_t chunk = 0;
};

LayerAttention layer_attention(const ModelConfig& config, std::size_t layer);

struct ParamSpec {
  std::string name;
  Shape shape;
  enum class Init { Normal, Zeros, Ones, Sinusoid } init = Init::Normal;
};

/// Parameter names and shapes in canonical order.
std::vector<ParamSpec> param_specs(const ModelConfig& config);

std::size_t param_count(const ModelConfig& config);
/// Excludes the token embedding (tied with the head) and any position table.
std::size_t param_count_without_embeddings(const ModelConfig& config);

template <typename T>
struct Weights {
  std::vector<NamedTensor<T>> params;

  const Tensor<T>& get(const std::string& name) const;
  Tensor<T>& get(const std::string& name);
  std::size_t index_of(const std::string& name) const;
};

/// Tokens [batch, seq] with optional per-token validity (padding).
struct TokenBatch {
  std::size_t batch = 1;
  std::size_t seq = 0;
  std::vector<std::int32_t> tokens;
  std::vector<std::uint8_t> valid;  // empty: all valid
  std::int64_t position_offset = 0;

  static TokenBatch single(std::vector<std::int32_t> tokens);
};

/// Decoder-only transformer: pre-norm residual blocks x + Attn(LN(x)),
/// x + FF(LN(x)) with GELU, final LayerNorm, head tied to the token
/// embedding.
template <typename T>
class Model {
 public:
  Model(ModelConfig config, Weights<T> weights);

  /// N(0, 0.02) matrices, zero biases, unit gains, position table seeded
  /// from the sinusoid. Deterministic in config.seed.
  static Model init(const ModelConfig& config);

  const ModelConfig& config() const noexcept { return config_; }
  const Weights<T>& weights() const noexcept { return weights_; }
  Weights<T>& weights() noexcept { return weights_; }

  /// Places every parameter on the graph (as leaves requiring gradients
  /// when trainable), in canonical order.
  std::vector<Var<T>> bind(Graph<T>& graph, bool trainable) const;

  /// logits [batch, seq, vocab]
  Var<T> forward(Graph<T>& graph, const std::vector<Var<T>>& params, const TokenBatch& batch) const;

  /// Graph-free convenience wrapper around forward.
  Tensor<T> logits(const TokenBatch& batch) const;

  template <typename U>
  Model<U> cast() const;

 private:
  ModelConfig config_;
  Weights<T> weights_;
};

/// Model weights (as 32-bit floats) plus optional extra tensors and header
/// keys, in the blob format with the model config as header.
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model,
                     const std::vector<NamedTensor<float>>& extra = {}, const KeyValues& extra_header = {});

template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& path);

template <typename T>
Model<T> model_from_blob(const BlobFile& blob);

}  // namespace lga::model
