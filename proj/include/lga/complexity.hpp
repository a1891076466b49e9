#pragma once

#include <string>
#include <vector>

#include "lga/attention.hpp"
#include "lga/model.hpp"

namespace lga::complexity {

using model::AttnType;

/// D model width, N sequence length, W window, C chunk, L group size.
struct CostModel {
  double D = 768;
  double N = 1024;
  double W = 512;
  double C = 16;
  double L = 4;

  void validate() const;
};

/// Leading-order attention cost with unit constants:
/// Global D N^2, Local D W N, GlobalApprox (D/C^2) N^2 + D W N,
/// Group (D/L) N^2 + D W N.
double attn_cost(AttnType kind, const CostModel& m);

/// attn_cost + D^2 N.
double total_cost(AttnType kind, const CostModel& m);

/// Per-layer multiply-accumulates with the kernel constants made explicit:
/// 2 per admissible (query, key) pair per channel, causal halving for full
/// attention, W keys per query for sliding windows and 2W for block-banded
/// windows. GlobalApprox counts D N^2 / C + 2 D W N (each query scores
/// about i / C summaries). Group averages its layer kinds.
double calibrated_attn_macs(AttnType kind, const CostModel& m,
                            attention::LocalSemantics semantics = attention::LocalSemantics::SlidingWindow);

struct SweepRow {
  std::string kind;
  double N = 0;
  double attn_ops = 0;
  double total_ops = 0;
  double ratio_vs_global = 0;  // attn_ops / Global attn_ops at the same N
};

/// One row per (kind, N), sorted by (kind, N). With block_banded set, local
/// and group also get "<kind>_block_banded" rows whose window term is 2W.
std::vector<SweepRow> sweep(const CostModel& base, const std::vector<double>& ns, const std::vector<AttnType>& kinds,
                            bool block_banded = false);

/// Header kind,N,attn_ops,total_ops,ratio_vs_global.
std::string to_csv(const std::vector<SweepRow>& rows);

}  // namespace lga::complexity
