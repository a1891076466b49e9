#include "lga/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include "lga/errors.hpp"
#include "lga/ops.hpp"
#include "lga/serialize.hpp"

namespace lga::trainer {

void Schedule::validate() const {
  if (!(max_lr >= 0) || !std::isfinite(max_lr)) throw ConfigError("max_lr", "must be a non-negative number");
  if (!(min_lr >= 0) || min_lr > max_lr) throw ConfigError("min_lr", "must lie in [0, max_lr]");
  if (warmup > total) throw ConfigError("warmup_steps", "must not exceed total steps");
}

double lr_at(const Schedule& s, std::size_t step) {
  if (step >= s.total) return s.min_lr;
  if (step < s.warmup) return s.max_lr * double(step) / double(s.warmup);
  const double frac = double(step - s.warmup) / double(s.total - s.warmup);
  return s.max_lr + (s.min_lr - s.max_lr) * frac;
}

template <typename T>
OptimState<T> OptimState<T>::zeros(const std::vector<NamedTensor<T>>& params, AdamConfig config) {
  OptimState<T> s;
  s.config = config;
  for (const auto& p : params) {
    s.m.emplace_back(p.value.shape());
    s.v.emplace_back(p.value.shape());
  }
  return s;
}

template <typename T>
double adam_step(OptimState<T>& state, std::vector<NamedTensor<T>>& params, const std::vector<Tensor<T>>& grads,
                 double lr) {
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    throw DimensionError("adam_step: " + std::to_string(params.size()) + " parameters, " +
                         std::to_string(grads.size()) + " gradients, " + std::to_string(state.m.size()) + " moments");
  }
  double sq = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].value.shape() || state.m[i].shape() != params[i].value.shape()) {
      throw DimensionError("adam_step: shape mismatch for '" + params[i].name + "'");
    }
    for (T g : grads[i].data()) {
      if (!std::isfinite(double(g))) throw NumericError("non-finite gradient in parameter '" + params[i].name + "'");
      sq += double(g) * double(g);
    }
  }
  const double norm = std::sqrt(sq);
  const AdamConfig& c = state.config;
  const double clip_scale = c.clip > 0 && norm > c.clip ? c.clip / norm : 1.0;

  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, double(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].value.data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    const auto g = grads[i].data();
    const bool decay = params[i].value.rank() >= 2 && c.weight_decay > 0;
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = double(g[j]) * clip_scale;
      double pj = double(p[j]);
      if (decay) pj -= lr * c.weight_decay * pj;
      const double mj = c.beta1 * double(m[j]) + (1.0 - c.beta1) * gj;
      const double vj = c.beta2 * double(v[j]) + (1.0 - c.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      pj -= lr * (mj / bc1) / (std::sqrt(vj / bc2) + c.eps);
      p[j] = static_cast<T>(pj);
    }
  }
  return norm;
}

template <typename T>
Var<T> batch_loss(Graph<T>& graph, const model::Model<T>& model, const std::vector<Var<T>>& params,
                  const data::PackedBatch& batch) {
  const std::size_t B = batch.batch, n = batch.seq_len;
  model::TokenBatch tb;
  tb.batch = B;
  tb.seq = n;
  tb.tokens = batch.tokens;
  tb.valid = batch.mask;
  Var<T> logits = model.forward(graph, params, tb);
  std::vector<std::int32_t> targets(B * n, 0);
  std::vector<std::uint8_t> keep(B * n, 0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t + 1 < n; ++t) {
      const std::size_t at = b * n + t;
      targets[at] = batch.tokens[at + 1];
      keep[at] = batch.mask[at] && batch.mask[at + 1] ? 1 : 0;
    }
  }
  return cross_entropy(logits, targets, keep);
}

namespace {

std::size_t kept_targets(const data::PackedBatch& batch) {
  std::size_t kept = 0;
  for (std::size_t b = 0; b < batch.batch; ++b) {
    for (std::size_t t = 0; t + 1 < batch.seq_len; ++t) {
      const std::size_t at = b * batch.seq_len + t;
      kept += batch.mask[at] && batch.mask[at + 1];
    }
  }
  return kept;
}

}  // namespace

std::string log_csv(const std::vector<LogRow>& rows) {
  std::ostringstream os;
  os.precision(9);
  os << "step,lr,loss\n";
  for (const auto& r : rows) os << r.step << ',' << r.lr << ',' << r.loss << '\n';
  return os.str();
}

template <typename T>
TrainResult<T> train(model::Model<T> model, const std::vector<data::PackedBatch>& batches, const TrainOptions& opts,
                     std::optional<OptimState<T>> resume) {
  opts.schedule.validate();
  if (opts.steps > 0 && batches.empty()) throw ContractError("train: no batches");
  OptimState<T> state = resume ? std::move(*resume) : OptimState<T>::zeros(model.weights().params, opts.adam);
  std::vector<LogRow> log;
  const std::size_t first = state.step;
  for (std::size_t step = first; step < first + opts.steps; ++step) {
    const auto& batch = batches[step % batches.size()];
    Graph<T> graph;
    auto params = model.bind(graph, true);
    Var<T> loss = batch_loss(graph, model, params, batch);
    const double value = double(loss.value().item());
    if (!std::isfinite(value)) {
      if (opts.checkpoint) save_training_checkpoint(*opts.checkpoint, model, state);
      throw NumericError("loss became non-finite at step " + std::to_string(step));
    }
    graph.backward(loss);
    std::vector<Tensor<T>> grads;
    grads.reserve(params.size());
    for (auto& p : params) grads.push_back(graph.grad(p));
    const double lr = lr_at(opts.schedule, step);
    adam_step(state, model.weights().params, grads, lr);
    const bool last = step + 1 == first + opts.steps;
    if (opts.log_every > 0 && ((step - first) % opts.log_every == 0 || last)) {
      log.push_back({step, lr, value});
      if (opts.on_log) opts.on_log(log.back());
    }
  }
  if (opts.checkpoint) save_training_checkpoint(*opts.checkpoint, model, state);
  return {std::move(model), std::move(state), std::move(log)};
}

template <typename T>
double eval_loss(const model::Model<T>& model, const std::vector<data::PackedBatch>& batches) {
  double total = 0;
  std::size_t count = 0;
  for (const auto& b : batches) {
    const std::size_t kept = kept_targets(b);
    if (kept == 0) continue;
    Graph<T> graph;
    auto params = model.bind(graph, false);
    total += double(batch_loss(graph, model, params, b).value().item()) * double(kept);
    count += kept;
  }
  if (count == 0) throw DegenerateError("eval_loss: no scored tokens");
  return total / double(count);
}

template <typename T>
void save_training_checkpoint(const std::filesystem::path& path, const model::Model<T>& model,
                              const OptimState<T>& state) {
  std::vector<NamedTensor<float>> extra;
  const auto& params = model.weights().params;
  for (std::size_t i = 0; i < state.m.size(); ++i) {
    extra.push_back({"opt.m." + params[i].name, state.m[i].template cast<float>()});
    extra.push_back({"opt.v." + params[i].name, state.v[i].template cast<float>()});
  }
  model::save_checkpoint(path, model, extra, {{"train_step", std::to_string(state.step)}});
}

template <typename T>
std::optional<OptimState<T>> load_optim_state(const std::filesystem::path& path, const model::Model<T>& model,
                                              AdamConfig config) {
  const BlobFile blob = load_blob(path);
  std::map<std::string, const Tensor<float>*> by_name;
  for (const auto& t : blob.tensors) by_name[t.name] = &t.value;
  OptimState<T> s;
  s.config = config;
  for (const auto& p : model.weights().params) {
    auto m = by_name.find("opt.m." + p.name);
    auto v = by_name.find("opt.v." + p.name);
    if (m == by_name.end() || v == by_name.end()) return std::nullopt;
    s.m.push_back(m->second->template cast<T>());
    s.v.push_back(v->second->template cast<T>());
  }
  auto it = blob.header.find("train_step");
  s.step = it == blob.header.end() ? 0 : std::stoull(it->second);
  return s;
}

template <typename T>
std::vector<PplRow> eval_ppl(const model::Model<T>& model, const std::vector<data::Document>& docs,
                             const std::vector<data::LengthBucket>& buckets, std::size_t window) {
  if (window == 0) throw ConfigError("seq_len", "evaluation window must be >= 1");
  std::map<std::string, const data::Document*> by_id;
  for (const auto& d : docs) by_id[d.id] = &d;
  std::vector<PplRow> rows;
  for (const auto& bucket : buckets) {
    PplRow row;
    row.bucket_min = bucket.min_len;
    row.bucket_max = bucket.max_len;
    row.count = bucket.ids.size();
    for (const auto& id : bucket.ids) {
      auto it = by_id.find(id);
      if (it == by_id.end()) throw ContractError("eval_ppl: bucket references unknown document '" + id + "'");
      std::vector<std::int32_t> seq{data::kBos};
      const auto ids = data::tokenize(it->second->text);
      seq.insert(seq.end(), ids.begin(), ids.end());
      seq.push_back(data::kEos);
      // Windows over predicted positions 1..len-1; inputs are the preceding
      // in-window tokens.
      for (std::size_t s = 0; s + 1 < seq.size(); s += window) {
        const std::size_t len = std::min(window, seq.size() - 1 - s);
        auto batch = model::TokenBatch::single(std::vector<std::int32_t>(seq.begin() + s, seq.begin() + s + len));
        std::vector<std::int32_t> targets(seq.begin() + s + 1, seq.begin() + s + 1 + len);
        Graph<T> graph;
        auto params = model.bind(graph, false);
        Var<T> logits = model.forward(graph, params, batch);
        row.nll_sum += double(cross_entropy(logits, targets).value().item()) * double(len);
        row.tokens += len;
      }
    }
    row.ppl = row.tokens == 0 ? std::numeric_limits<double>::quiet_NaN() : std::exp(row.nll_sum / double(row.tokens));
    rows.push_back(row);
  }
  return rows;
}

std::string ppl_csv(const std::vector<PplRow>& rows) {
  std::ostringstream os;
  os.precision(9);
  os << "bucket_min,bucket_max,count,ppl\n";
  for (const auto& r : rows) {
    os << r.bucket_min << ',' << r.bucket_max << ',' << r.count << ',';
    if (r.count > 0 && std::isfinite(r.ppl)) os << r.ppl;
    os << '\n';
  }
  return os.str();
}

#define LGA_INSTANTIATE_TRAINER(T)                                                                                \
  template struct OptimState<T>;                                                                                \
  template double adam_step(OptimState<T>&, std::vector<NamedTensor<T>>&, const std::vector<Tensor<T>>&, double); \
  template Var<T> batch_loss(Graph<T>&, const model::Model<T>&, const std::vector<Var<T>>&,                     \
                             const data::PackedBatch&);                                                         \
  template TrainResult<T> train(model::Model<T>, const std::vector<data::PackedBatch>&, const TrainOptions&,     \
                                std::optional<OptimState<T>>);                                                  \
  template double eval_loss(const model::Model<T>&, const std::vector<data::PackedBatch>&);                     \
  template void save_training_checkpoint(const std::filesystem::path&, const model::Model<T>&,                  \
                                         const OptimState<T>&);                                                 \
  template std::optional<OptimState<T>> load_optim_state(const std::filesystem::path&, const model::Model<T>&,  \
                                                         AdamConfig);                                           \
  template std::vector<PplRow> eval_ppl(const model::Model<T>&, const std::vector<data::Document>&,             \
                                        const std::vector<data::LengthBucket>&, std::size_t);

LGA_INSTANTIATE_TRAINER(float)
LGA_INSTANTIATE_TRAINER(double)

}  // namespace lga::trainer
