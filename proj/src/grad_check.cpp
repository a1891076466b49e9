#include "lga/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace lga {

double GradCheckReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_rel_error);
  return m;
}

bool GradCheckReport::all_pass() const {
  return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.pass; });
}

namespace {

double evaluate(const LossBuilder& f, const std::vector<Tensor<double>>& values) {
  Graph<double> g;
  std::vector<Var<double>> vars;
  vars.reserve(values.size());
  for (const auto& v : values) vars.push_back(g.constant(v));
  return f(g, vars).value().item();
}

}  // namespace

GradCheckReport grad_check(const LossBuilder& f, const std::vector<NamedTensor<double>>& params, double step,
                           double tolerance) {
  std::vector<Tensor<double>> values;
  for (const auto& p : params) values.push_back(p.value);

  std::vector<Tensor<double>> analytic;
  {
    Graph<double> g;
    std::vector<Var<double>> vars;
    for (const auto& v : values) vars.push_back(g.parameter(v));
    Var<double> loss = f(g, vars);
    g.backward(loss);
    for (auto& v : vars) analytic.push_back(g.grad(v));
  }

  GradCheckReport report;
  for (std::size_t p = 0; p < values.size(); ++p) {
    GradCheckEntry entry;
    entry.name = params[p].name;
    double scale = 0.0;
    double worst = 0.0;
    for (std::size_t i = 0; i < values[p].size(); ++i) {
      const double saved = values[p][i];
      values[p][i] = saved + step;
      const double up = evaluate(f, values);
      values[p][i] = saved - step;
      const double down = evaluate(f, values);
      values[p][i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[p][i];
      worst = std::max(worst, std::abs(a - numeric));
      scale = std::max({scale, std::abs(a), std::abs(numeric)});
    }
    entry.max_abs_error = worst;
    entry.max_rel_error = scale > 0.0 ? worst / scale : 0.0;
    entry.pass = entry.max_rel_error < tolerance;
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace lga
