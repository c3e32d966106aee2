/**
 * Copyright 2026 The ReFix Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "refix/augment.hpp"
#include "refix/data.hpp"
#include "refix/metrics.hpp"
#include "refix/model.hpp"
#include "refix/objective.hpp"

namespace refix::trainer {

// Floating-point type of the training loop.
using Real = float;

// eta(t) = eta0 * cos(7 pi t / (16 K)) for 0 <= t <= K.
double cosine_lr(std::size_t t, std::size_t total, double lr0);

// v <- momentum * v + g + weight_decay * theta; theta <- theta - lr * v.
// Throws DimensionError when grads do not match the parameters.
template <typename T>
void sgd_step(models::ModelState<T>& state, const models::ParamMap<T>& grads, double lr, double momentum,
              double weight_decay);

struct TrainConfig {
  std::size_t iterations = 20000;
  std::size_t batch = 64;
  std::size_t mu = 7;
  double lr = 0.03;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double ema_momentum = 0.999;
  objective::ObjectiveConfig objective;
  objective::ThresholdMode threshold_mode = objective::ThresholdMode::kFixed;
  std::size_t cpl_refresh_interval = 1;
  std::size_t log_interval = 100;
  std::size_t eval_interval = 1000;
  std::size_t median_window = 20;
  std::size_t calibration_bins = 10;
  std::uint64_t seed = 0;
  augment::AugmentOptions augment;

  // Throws ConfigError naming the offending field.
  void validate() const;
};

// Shuffled passes over [0, n): each epoch is a fresh permutation drawn from
// a stream keyed on (seed, stream, epoch).
class EpochSampler {
 public:
  EpochSampler(std::size_t n, std::uint64_t seed, std::uint64_t stream);
  std::vector<std::size_t> next(std::size_t count);
  std::size_t epoch() const { return epoch_; }

 private:
  void reshuffle();
  std::size_t n_;
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::size_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<std::size_t> order_;
};

struct TrainLogRow {
  std::size_t iteration = 0;  // completed steps
  double lr = 0.0;
  objective::LossBreakdown loss;
  std::optional<double> pseudo_acc;
  std::optional<double> eval_top1;
  std::optional<double> eval_top5;
  std::optional<double> eval_ece;
};

// Fixed CSV schema of the training log.
std::string log_header();
std::string format_row(const TrainLogRow& row);

// Error history of the periodic evaluations.
struct EvalHistory {
  std::vector<std::size_t> iterations;
  std::vector<double> top1;

  void add(std::size_t iteration, double error);
  std::optional<double> best() const;
  std::optional<double> last() const;
  // Median of the last `window` evaluations (mean of the middle two when even).
  std::optional<double> median_last(std::size_t window) const;
};

// EMA-weight inference over a dataset; probabilities are computed in double
// from the model's logits.
metrics::MetricReport evaluate(const models::ModelSpec& spec, const models::ParamMap<Real>& params,
                               const data::Dataset& eval, std::size_t calibration_bins = 10);

struct TrainHooks {
  std::function<void(const TrainLogRow&)> on_row;
  // Called after each periodic evaluation with the state it evaluated.
  std::function<void(std::size_t iteration, const models::ModelState<Real>&)> on_eval;
  // Called after every completed iteration, after any evaluation.
  std::function<void(std::size_t iteration, const models::ModelState<Real>&)> on_step;
};

struct TrainResult {
  models::ModelState<Real> state;
  std::vector<TrainLogRow> log;
  EvalHistory history;
  metrics::MetricReport final_report;
  objective::ThresholdPolicy policy;
};

// Algorithm 1. Throws DataError for unusable datasets (empty class in the
// labeled set, mismatched shapes) and NumericError, naming the last good
// iteration, when a step produces a non-finite value.
TrainResult train(const TrainConfig& config, const models::ModelSpec& spec, const data::Dataset& labeled,
                  const data::Dataset& unlabeled, const data::Dataset& eval, const TrainHooks& hooks = {});

// Checkpoint: <dir>/checkpoint.manifest listing the spec and one tensor file
// per parameter, EMA parameter and momentum buffer.
std::filesystem::path save_checkpoint(const std::filesystem::path& dir, const models::ModelState<Real>& state,
                                      std::size_t iteration);
struct Checkpoint {
  models::ModelState<Real> state;
  std::size_t iteration = 0;
};
Checkpoint load_checkpoint(const std::filesystem::path& manifest_or_dir);

data::Manifest spec_to_manifest(const models::ModelSpec& spec);
models::ModelSpec spec_from_manifest(const data::Manifest& manifest);

}  // namespace refix::trainer
