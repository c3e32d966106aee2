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

#include "refix/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>

#include "refix/rng.hpp"

namespace refix::trainer {

namespace fs = std::filesystem;

namespace {

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string optional_cell(const std::optional<double>& v) { return v ? fmt17(*v) : std::string(); }

std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::string join_doubles(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt17(v[i]);
  return s;
}

template <typename V, typename F>
std::vector<V> split_list(const std::string& text, F convert) {
  std::vector<V> out;
  std::stringstream ss(text);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(convert(cell));
  return out;
}

const std::string& require(const data::Manifest& m, const std::string& key) {
  auto it = m.find(key);
  if (it == m.end()) throw FormatError("checkpoint manifest lacks key '" + key + "'");
  return it->second;
}

std::size_t to_size(const std::string& s) {
  std::size_t pos = 0;
  const unsigned long long v = std::stoull(s, &pos);
  if (pos != s.size()) throw FormatError("expected an integer, got '" + s + "'");
  return static_cast<std::size_t>(v);
}

void check_dataset(const data::Dataset& ds, const models::ModelSpec& spec, const char* role, bool need_labels) {
  if (ds.size() == 0) throw DataError(std::string(role) + " set is empty");
  if (ds.channels() != spec.channels || ds.height() != spec.height || ds.width() != spec.width) {
    throw DataError(std::string(role) + " images are " + shape_string(ds.images.shape()) + " but the model expects " +
                    shape_string(spec.input_shape(ds.size())));
  }
  if (ds.classes != spec.classes) {
    throw DataError(std::string(role) + " set has " + std::to_string(ds.classes) + " classes, the model " +
                    std::to_string(spec.classes));
  }
  if (need_labels && !ds.labeled()) throw DataError(std::string(role) + " set has no labels");
}

Tensor<double> probabilities(const Tensor<Real>& logits) {
  return grad::kernels::softmax(logits.cast<double>(), 1.0);
}

}  // namespace

double cosine_lr(std::size_t t, std::size_t total, double lr0) {
  if (total == 0) throw ContractError("cosine schedule needs at least one iteration");
  if (t > total) throw ContractError("iteration " + std::to_string(t) + " beyond the schedule length " + std::to_string(total));
  return lr0 * std::cos(7.0 * std::numbers::pi * static_cast<double>(t) / (16.0 * static_cast<double>(total)));
}

template <typename T>
void sgd_step(models::ModelState<T>& state, const models::ParamMap<T>& grads, double lr, double momentum,
              double weight_decay) {
  if (grads.size() != state.params.size()) throw DimensionError("sgd_step: gradient set does not match parameters");
  const T m = static_cast<T>(momentum);
  const T wd = static_cast<T>(weight_decay);
  const T step = static_cast<T>(lr);
  for (auto& [name, theta] : state.params) {
    auto git = grads.find(name);
    if (git == grads.end()) throw DimensionError("sgd_step: no gradient for " + name);
    if (git->second.shape() != theta.shape()) {
      throw DimensionError("sgd_step: gradient of " + name + " is " + shape_string(git->second.shape()) +
                           ", parameter is " + shape_string(theta.shape()));
    }
    auto p = theta.data();
    auto v = state.momentum.at(name).data();
    const auto g = git->second.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      v[i] = m * v[i] + g[i] + wd * p[i];
      p[i] -= step * v[i];
    }
  }
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (iterations < 1) fail("iterations must be at least 1");
  if (batch < 1) fail("batch must be at least 1");
  if (mu < 1) fail("mu must be at least 1");
  if (!(lr > 0.0)) fail("lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be nonnegative");
  if (!(ema_momentum >= 0.0 && ema_momentum < 1.0)) fail("ema_momentum must lie in [0, 1)");
  if (!(objective.tau >= 0.0 && objective.tau <= 1.0)) fail("tau must lie in [0, 1]");
  if (!(objective.temperature > 0.0)) fail("temperature must be positive");
  if (!(objective.lambda_u >= 0.0)) fail("lambda_u must be nonnegative");
  if (cpl_refresh_interval < 1) fail("cpl_refresh_interval must be at least 1");
  if (log_interval < 1) fail("log_interval must be at least 1");
  if (eval_interval < 1) fail("eval_interval must be at least 1");
  if (median_window < 1) fail("median_window must be at least 1");
  if (calibration_bins < 1) fail("bins must be at least 1");
  if (augment.workers < 1) fail("workers must be at least 1");
}

EpochSampler::EpochSampler(std::size_t n, std::uint64_t seed, std::uint64_t stream)
    : n_(n), seed_(seed), stream_(stream) {
  if (n == 0) throw DataError("cannot sample from an empty set");
  reshuffle();
}

void EpochSampler::reshuffle() {
  order_.resize(n_);
  for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
  Rng rng = Rng::stream({seed_, 0xe90cULL, stream_, epoch_});
  rng.shuffle(order_.begin(), order_.end());
  cursor_ = 0;
}

std::vector<std::size_t> EpochSampler::next(std::size_t count) {
  std::vector<std::size_t> out;
  out.reserve(count);
  while (out.size() < count) {
    if (cursor_ == n_) {
      ++epoch_;
      reshuffle();
    }
    out.push_back(order_[cursor_++]);
  }
  return out;
}

std::string log_header() {
  return "iteration,lr,loss_total,loss_sup,loss_unsup_ce,loss_kl,mask_ratio,utilization,pseudo_acc,eval_top1,"
         "eval_top5,eval_ece";
}

std::string format_row(const TrainLogRow& row) {
  const objective::LossBreakdown& l = row.loss;
  return std::to_string(row.iteration) + ',' + fmt17(row.lr) + ',' + fmt17(l.loss_total) + ',' + fmt17(l.loss_sup) +
         ',' + fmt17(l.loss_unsup_ce) + ',' + fmt17(l.loss_kl) + ',' + fmt17(l.mask_ratio) + ',' +
         fmt17(l.utilization) + ',' + optional_cell(row.pseudo_acc) + ',' + optional_cell(row.eval_top1) + ',' +
         optional_cell(row.eval_top5) + ',' + optional_cell(row.eval_ece);
}

void EvalHistory::add(std::size_t iteration, double error) {
  iterations.push_back(iteration);
  top1.push_back(error);
}

std::optional<double> EvalHistory::best() const {
  if (top1.empty()) return std::nullopt;
  return *std::min_element(top1.begin(), top1.end());
}

std::optional<double> EvalHistory::last() const {
  if (top1.empty()) return std::nullopt;
  return top1.back();
}

std::optional<double> EvalHistory::median_last(std::size_t window) const {
  if (top1.empty() || window == 0) return std::nullopt;
  const std::size_t n = std::min(window, top1.size());
  std::vector<double> tail(top1.end() - static_cast<std::ptrdiff_t>(n), top1.end());
  std::sort(tail.begin(), tail.end());
  return n % 2 == 1 ? tail[n / 2] : (tail[n / 2 - 1] + tail[n / 2]) / 2.0;
}

metrics::MetricReport evaluate(const models::ModelSpec& spec, const models::ParamMap<Real>& params,
                               const data::Dataset& eval, std::size_t calibration_bins) {
  check_dataset(eval, spec, "evaluation", true);
  const Tensor<Real> logits = models::infer(spec, params, eval.images);
  metrics::MetricAccumulator acc(spec.classes, calibration_bins);
  acc.add(probabilities(logits), eval.labels);
  return acc.finalize();
}

TrainResult train(const TrainConfig& config, const models::ModelSpec& spec, const data::Dataset& labeled,
                  const data::Dataset& unlabeled, const data::Dataset& eval, const TrainHooks& hooks) {
  config.validate();
  spec.validate();
  check_dataset(labeled, spec, "labeled", true);
  check_dataset(unlabeled, spec, "unlabeled", false);
  check_dataset(eval, spec, "evaluation", true);
  const auto counts = labeled.class_counts();
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] == 0) throw DataError("labeled set has no samples of class " + std::to_string(c));
  }

  TrainResult result;
  result.state = models::init<Real>(spec, config.seed);
  result.policy = objective::ThresholdPolicy(config.threshold_mode, config.objective.tau, spec.classes,
                                             unlabeled.size());
  models::ModelState<Real>& state = result.state;
  objective::ThresholdPolicy& policy = result.policy;

  EpochSampler labeled_sampler(labeled.size(), config.seed, 0);
  EpochSampler unlabeled_sampler(unlabeled.size(), config.seed, 1);
  const std::size_t ub = config.mu * config.batch;
  const bool have_truth = unlabeled.truth.available();

  std::size_t last_good = 0;
  for (std::size_t t = 0; t < config.iterations; ++t) {
    const double lr = cosine_lr(t, config.iterations, config.lr);
    const std::vector<std::size_t> li = labeled_sampler.next(config.batch);
    const std::vector<std::size_t> ui = unlabeled_sampler.next(ub);
    const bool log_now = (t + 1) % config.log_interval == 0 || t + 1 == config.iterations;
    const bool eval_now = (t + 1) % config.eval_interval == 0 || t + 1 == config.iterations;
    TrainLogRow row;
    row.iteration = t + 1;
    row.lr = lr;
    try {
      const Tensor<Real> x_weak =
          augment::augment_batch(labeled.images, li, augment::View::kWeak, config.augment, config.seed, t, 0);
      const Tensor<Real> u_weak =
          augment::augment_batch(unlabeled.images, ui, augment::View::kWeak, config.augment, config.seed, t, 1);
      const Tensor<Real> u_strong =
          augment::augment_batch(unlabeled.images, ui, augment::View::kStrong, config.augment, config.seed, t, 1);
      std::vector<std::size_t> labels(li.size());
      for (std::size_t i = 0; i < li.size(); ++i) labels[i] = labeled.labels[li[i]];

      // Pseudo-label targets from the current weights, no tape.
      const Tensor<Real> weak_logits = models::infer(spec, state.params, u_weak);

      grad::Tape<Real> tape;
      const models::ParamVars<Real> vars = models::bind(tape, state.params);
      const grad::Var<Real> lab_logits = models::forward(tape, spec, vars, x_weak);
      const grad::Var<Real> strong_logits = models::forward(tape, spec, vars, u_strong);
      const auto obj = objective::compute_objective(lab_logits, labels, weak_logits, strong_logits, policy,
                                                    config.objective);
      row.loss = obj.breakdown;
      const grad::Gradients<Real> grads = tape.backward(obj.total);
      models::ParamMap<Real> g;
      for (const auto& [name, var] : vars) g.emplace(name, grads.of(var));
      sgd_step(state, g, lr, config.momentum, config.weight_decay);
      models::ema_update(state, config.ema_momentum);
      for (const auto& [name, p] : state.params) {
        if (!p.all_finite()) throw NumericError("parameter " + name + " became non-finite");
      }

      policy.observe(ui, obj.decisions);
      if ((t + 1) % config.cpl_refresh_interval == 0) policy.refresh();
      if (have_truth && log_now) {
        row.pseudo_acc = metrics::PseudoLabelAccess::tally(obj.decisions, ui, unlabeled.truth).value();
      }
    } catch (const NumericError& e) {
      const double nan = std::numeric_limits<double>::quiet_NaN();
      row.loss.loss_total = row.loss.loss_sup = row.loss.loss_unsup_ce = row.loss.loss_kl = nan;
      if (hooks.on_row) hooks.on_row(row);
      result.log.push_back(row);
      throw NumericError("non-finite value at iteration " + std::to_string(t + 1) + " (last good iteration " +
                         std::to_string(last_good) + "): " + e.what());
    }
    last_good = t + 1;

    if (eval_now) {
      result.final_report = evaluate(spec, state.ema, eval, config.calibration_bins);
      result.history.add(t + 1, result.final_report.top1_error);
      row.eval_top1 = result.final_report.top1_error;
      row.eval_top5 = result.final_report.top5_error;
      row.eval_ece = result.final_report.calibration.ece;
      if (hooks.on_eval) hooks.on_eval(t + 1, state);
    }
    if (log_now || eval_now) {
      if (hooks.on_row) hooks.on_row(row);
      result.log.push_back(row);
    }
    if (hooks.on_step) hooks.on_step(t + 1, state);
  }
  return result;
}

data::Manifest spec_to_manifest(const models::ModelSpec& spec) {
  data::Manifest m;
  m["arch"] = models::arch_name(spec.arch);
  m["widths"] = join_sizes(spec.widths);
  m["channels"] = std::to_string(spec.channels);
  m["height"] = std::to_string(spec.height);
  m["width"] = std::to_string(spec.width);
  m["classes"] = std::to_string(spec.classes);
  m["norm_mean"] = join_doubles(spec.norm_mean);
  m["norm_std"] = join_doubles(spec.norm_std);
  return m;
}

models::ModelSpec spec_from_manifest(const data::Manifest& m) {
  models::ModelSpec spec;
  try {
    spec.arch = models::parse_arch(require(m, "arch"));
    spec.widths = split_list<std::size_t>(require(m, "widths"), to_size);
    spec.channels = to_size(require(m, "channels"));
    spec.height = to_size(require(m, "height"));
    spec.width = to_size(require(m, "width"));
    spec.classes = to_size(require(m, "classes"));
    auto to_double = [](const std::string& s) { return std::stod(s); };
    spec.norm_mean = split_list<double>(require(m, "norm_mean"), to_double);
    spec.norm_std = split_list<double>(require(m, "norm_std"), to_double);
  } catch (const std::logic_error& e) {
    throw FormatError(std::string("malformed model description: ") + e.what());
  }
  spec.validate();
  return spec;
}

fs::path save_checkpoint(const fs::path& dir, const models::ModelState<Real>& state, std::size_t iteration) {
  models::check_consistent(state);
  fs::create_directories(dir);
  data::Manifest m = spec_to_manifest(state.spec);
  m["iteration"] = std::to_string(iteration);
  const std::pair<const char*, const models::ParamMap<Real>*> groups[] = {
      {"param", &state.params}, {"ema", &state.ema}, {"momentum", &state.momentum}};
  for (const auto& [group, map] : groups) {
    for (const auto& [name, tensor] : *map) {
      const std::string rel = std::string(group) + "/" + name + ".rfxt";
      data::write_tensor_file(dir / rel, tensor);
      m[std::string(group) + "." + name] = rel;
    }
  }
  const fs::path path = dir / "checkpoint.manifest";
  data::write_manifest(path, m);
  return path;
}

Checkpoint load_checkpoint(const fs::path& manifest_or_dir) {
  const fs::path path = fs::is_directory(manifest_or_dir) ? manifest_or_dir / "checkpoint.manifest" : manifest_or_dir;
  if (!fs::exists(path)) throw DataError("checkpoint not found: " + path.string());
  const data::Manifest m = data::read_manifest(path);
  Checkpoint ck;
  ck.state.spec = spec_from_manifest(m);
  ck.iteration = to_size(require(m, "iteration"));
  const std::pair<const char*, models::ParamMap<Real>*> groups[] = {
      {"param", &ck.state.params}, {"ema", &ck.state.ema}, {"momentum", &ck.state.momentum}};
  for (const auto& [name, shape] : models::parameter_layout(ck.state.spec)) {
    for (const auto& [group, map] : groups) {
      const fs::path file = path.parent_path() / require(m, std::string(group) + "." + name);
      if (!fs::exists(file)) throw DataError("checkpoint tensor not found: " + file.string());
      Tensor<Real> t = data::read_tensor_file(file).as_float().cast<Real>();
      if (t.shape() != shape) {
        throw DataError("checkpoint tensor " + file.string() + " has shape " + shape_string(t.shape()) +
                        ", the model expects " + shape_string(shape));
      }
      map->emplace(name, std::move(t));
    }
  }
  models::check_consistent(ck.state);
  return ck;
}

template void sgd_step<float>(models::ModelState<float>&, const models::ParamMap<float>&, double, double, double);
template void sgd_step<double>(models::ModelState<double>&, const models::ParamMap<double>&, double, double, double);

}  // namespace refix::trainer
