#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "lga/data.hpp"
#include "lga/graph.hpp"
#include "lga/model.hpp"
#include "lga/tensor.hpp"

namespace lga::trainer {

struct Schedule {
  double max_lr = 1e-3;
  double min_lr = 1e-5;
  std::size_t warmup = 2000;
  std::size_t total = 20000;

  void validate() const;
};

/// Linear ramp 0 -> max_lr over warmup, then linear decay to min_lr at
/// total; clamps to min_lr past total.
double lr_at(const Schedule& s, std::size_t step);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip = 1.0;  // global gradient norm; 0 disables
};

template <typename T>
struct OptimState {
  AdamConfig config;
  std::size_t step = 0;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;

  static OptimState zeros(const std::vector<NamedTensor<T>>& params, AdamConfig config = {});
};

/// Clips grads to the global norm, applies decoupled weight decay to
/// parameters of rank >= 2, then a bias-corrected Adam update. Returns the
/// pre-clip gradient norm. Throws NumericError naming the first parameter
/// with a non-finite gradient.
template <typename T>
double adam_step(OptimState<T>& state, std::vector<NamedTensor<T>>& params, const std::vector<Tensor<T>>& grads,
                 double lr);

/// Mean next-token cross entropy of one packed batch: position t predicts
/// token t+1 when both are unmasked.
template <typename T>
Var<T> batch_loss(Graph<T>& graph, const model::Model<T>& model, const std::vector<Var<T>>& params,
                  const data::PackedBatch& batch);

struct LogRow {
  std::size_t step = 0;
  double lr = 0;
  double loss = 0;
};

std::string log_csv(const std::vector<LogRow>& rows);

struct TrainOptions {
  Schedule schedule;
  AdamConfig adam;
  std::size_t steps = 2000;
  std::size_t log_every = 10;
  // Written at the end and before aborting on a non-finite loss.
  std::optional<std::filesystem::path> checkpoint;
  std::function<void(const LogRow&)> on_log;
};

template <typename T>
struct TrainResult {
  model::Model<T> model;
  OptimState<T> state;
  std::vector<LogRow> log;
};

/// Deterministic loop over batches (cycled in order). Resumes from `resume`
/// when given.
template <typename T>
TrainResult<T> train(model::Model<T> model, const std::vector<data::PackedBatch>& batches, const TrainOptions& opts,
                     std::optional<OptimState<T>> resume = std::nullopt);

/// Token-weighted mean loss over batches.
template <typename T>
double eval_loss(const model::Model<T>& model, const std::vector<data::PackedBatch>& batches);

/// Weights, optimizer moments ("opt.m.<name>", "opt.v.<name>") and step.
template <typename T>
void save_training_checkpoint(const std::filesystem::path& path, const model::Model<T>& model,
                              const OptimState<T>& state);

/// Moments saved by save_training_checkpoint, or nullopt when absent.
template <typename T>
std::optional<OptimState<T>> load_optim_state(const std::filesystem::path& path, const model::Model<T>& model,
                                              AdamConfig config = {});

struct PplRow {
  std::size_t bucket_min = 0;
  std::size_t bucket_max = 0;
  std::size_t count = 0;
  double ppl = 0;  // NaN for empty buckets
  double nll_sum = 0;
  std::size_t tokens = 0;
};

/// Per bucket exp(mean NLL). Each document is scored as BOS bytes EOS in
/// non-overlapping windows of `window` predicted tokens.
template <typename T>
std::vector<PplRow> eval_ppl(const model::Model<T>& model, const std::vector<data::Document>& docs,
                             const std::vector<data::LengthBucket>& buckets, std::size_t window);

/// Header bucket_min,bucket_max,count,ppl; empty buckets leave ppl blank.
std::string ppl_csv(const std::vector<PplRow>& rows);

}  // namespace lga::trainer
