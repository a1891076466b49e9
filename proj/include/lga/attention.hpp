#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <tuple>
#include <variant>
#include <vector>

#include "lga/graph.hpp"
#include "lga/tensor.hpp"

// Attention strategies over per-head tensors laid out [batch, n, heads,
// head_dim] (rank 3 [n, heads, head_dim] is accepted as batch 1). All
// strategies are causal and scale logits by 1/sqrt(head_dim).
namespace lga::attention {

struct GlobalKind {};
struct LocalKind {
  std::size_t window = 0;
};
struct GlobalApproxKind {
  std::size_t window = 0;
  std::size_t chunk = 0;
};
struct GroupKind {
  std::size_t group_size = 0;
  std::size_t window = 0;
};
using AttnKind = std::variant<GlobalKind, LocalKind, GlobalApproxKind, GroupKind>;

void validate(const AttnKind& kind);
std::string describe(const AttnKind& kind);

enum class LayerKind { Global, Local };

/// Global iff l mod group_size == 0.
LayerKind layer_kind(std::size_t layer, std::size_t group_size);

struct GroupSchedule {
  std::size_t n_layers = 0;
  std::size_t group_size = 1;
  std::vector<LayerKind> kinds;

  static GroupSchedule make(std::size_t n_layers, std::size_t group_size);
  std::size_t global_layers() const;
};

// SlidingWindow: query i sees keys max(0, i-w+1)..i.
// BlockBanded: query in block b = i/w sees blocks b-1 and b up to i.
enum class LocalSemantics { SlidingWindow, BlockBanded };

std::string to_string(LocalSemantics s);
LocalSemantics parse_local_semantics(const std::string& s);

// Literal: summaries are sum(x) + ln(c) on every component.
// LogitSide: summaries are mean(x) and the logit gains ln(count).
enum class Compensation { Literal, LogitSide };

struct AttnOptions {
  // Validity per [batch * n] token; empty means every token is valid. A query
  // always admits its own key, so padded queries never produce empty rows.
  std::vector<std::uint8_t> valid;
  // One slope per head; empty disables the linear distance bias.
  std::vector<double> alibi_slopes;
};

/// q, k, v = h Wq, h Wk, h Wv reshaped to [..., n, heads, d / heads].
template <typename T>
std::tuple<Var<T>, Var<T>, Var<T>> qkv_project(Var<T> h, Var<T> wq, Var<T> wk, Var<T> wv, std::size_t heads);

/// exp(q.k / sqrt(D))
double sim(std::span<const double> q, std::span<const double> k, std::size_t normalizer);

/// Fused causal attention where query i admits keys window_start[i]..i.
/// Only admissible pairs are computed.
template <typename T>
Var<T> masked_attention(Var<T> q, Var<T> k, Var<T> v, std::span<const std::size_t> window_start,
                        const AttnOptions& opts);

template <typename T>
Var<T> global_attention(Var<T> q, Var<T> k, Var<T> v, const AttnOptions& opts = {});

/// Reference local attention realized as masked global attention.
template <typename T>
Var<T> local_attention_naive(Var<T> q, Var<T> k, Var<T> v, std::size_t window, LocalSemantics semantics,
                             const AttnOptions& opts = {});

/// Block-banded local attention: pad to a multiple of w, split into blocks,
/// pair every block with its predecessor, mask, softmax, contract, unpad.
template <typename T>
Var<T> local_attention_blockwise(Var<T> q, Var<T> k, Var<T> v, std::size_t window, const AttnOptions& opts = {});

/// Summaries of the floor(n / c) full chunks of x [n, heads, head_dim].
template <typename T>
Tensor<T> chunk_summaries(const Tensor<T>& x, std::size_t chunk, Compensation comp = Compensation::Literal);

/// Local sliding-window attention plus one summarized key/value per full
/// chunk lying entirely before the window, in one joint softmax. Tokens
/// between the last attendable chunk and the window are attended
/// individually.
template <typename T>
Var<T> global_approx_attention(Var<T> q, Var<T> k, Var<T> v, std::size_t window, std::size_t chunk,
                               const AttnOptions& opts = {}, Compensation comp = Compensation::Literal);

/// Index of the first token query i attends individually under global
/// approximation (everything before it is covered by chunk summaries).
std::size_t approx_first_token(std::size_t i, std::size_t window, std::size_t chunk);

/// Single-query global approximation over an all-valid history of i + 1
/// keys/values for one head ([i + 1, head_dim] contiguous). Used by
/// incremental decoding.
template <typename T>
void global_approx_query(std::span<const T> q, std::span<const T> keys, std::span<const T> values,
                         std::size_t window, std::size_t chunk, Compensation comp, double alibi_slope,
                         std::span<T> out);

/// Multiply-accumulates performed by attention score and context
/// contractions on this thread since the last reset.
std::uint64_t mac_count();
void reset_mac_count();
void add_macs(std::uint64_t n);

/// Test hook: lets the blockwise kernel admit one future key per query.
void set_blockwise_mask_fault(bool enabled);
bool blockwise_mask_fault();

}  // namespace lga::attention
