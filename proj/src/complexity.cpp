#include "lga/complexity.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <tuple>

#include "lga/errors.hpp"

namespace lga::complexity {

void CostModel::validate() const {
  auto positive = [](double v, const char* key) {
    if (!(v > 0) || !std::isfinite(v)) throw ConfigError(key, "must be positive");
  };
  positive(D, "D");
  positive(N, "N");
  positive(C, "C");
  positive(L, "L");
  if (!(W >= 0) || !std::isfinite(W)) throw ConfigError("W", "must be non-negative");
}

double attn_cost(AttnType kind, const CostModel& m) {
  m.validate();
  const double D = m.D, N = m.N, W = m.W;
  switch (kind) {
    case AttnType::Global:
      return D * N * N;
    case AttnType::Local:
      return D * W * N;
    case AttnType::GlobalApprox:
      return D / (m.C * m.C) * N * N + D * W * N;
    case AttnType::Group:
      return D / m.L * N * N + D * W * N;
  }
  return 0;
}

double total_cost(AttnType kind, const CostModel& m) { return attn_cost(kind, m) + m.D * m.D * m.N; }

double calibrated_attn_macs(AttnType kind, const CostModel& m, attention::LocalSemantics semantics) {
  m.validate();
  const double D = m.D, N = m.N, W = m.W;
  const double window_keys = semantics == attention::LocalSemantics::BlockBanded ? 2 * W : W;
  const double global = 2.0 * 0.5 * D * N * N;
  const double local = 2.0 * D * window_keys * N;
  switch (kind) {
    case AttnType::Global:
      return global;
    case AttnType::Local:
      return local;
    case AttnType::GlobalApprox:
      return D * N * N / m.C + 2.0 * D * W * N;
    case AttnType::Group:
      return global / m.L + (1.0 - 1.0 / m.L) * local;
  }
  return 0;
}

std::vector<SweepRow> sweep(const CostModel& base, const std::vector<double>& ns, const std::vector<AttnType>& kinds,
                            bool block_banded) {
  if (ns.empty() || kinds.empty()) throw ConfigError("grid", "sweep needs at least one N and one kind");
  std::vector<SweepRow> rows;
  for (double n : ns) {
    CostModel m = base;
    m.N = n;
    const double global = attn_cost(AttnType::Global, m);
    for (AttnType k : kinds) {
      rows.push_back({model::to_string(k), n, attn_cost(k, m), total_cost(k, m), attn_cost(k, m) / global});
      if (block_banded && (k == AttnType::Local || k == AttnType::Group)) {
        CostModel wide = m;
        wide.W = 2 * m.W;
        const double a = attn_cost(k, wide);
        rows.push_back({model::to_string(k) + "_block_banded", n, a, a + m.D * m.D * m.N, a / global});
      }
    }
  }
  std::sort(rows.begin(), rows.end(),
            [](const SweepRow& a, const SweepRow& b) { return std::tie(a.kind, a.N) < std::tie(b.kind, b.N); });
  return rows;
}

std::string to_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os.precision(17);
  os << "kind,N,attn_ops,total_ops,ratio_vs_global\n";
  for (const auto& r : rows) {
    os << r.kind << ',' << r.N << ',' << r.attn_ops << ',' << r.total_ops << ',' << r.ratio_vs_global << '\n';
  }
  return os.str();
}

}  // namespace lga::complexity
