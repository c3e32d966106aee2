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

#include "refix/objective.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "refix/exact_sum.hpp"

namespace refix::objective {

namespace {

using grad::Var;

void check_rows(std::size_t rows, std::size_t decisions, const char* what) {
  if (rows != decisions) {
    throw DimensionError(std::string(what) + ": " + std::to_string(decisions) + " decisions for " +
                         std::to_string(rows) + " rows");
  }
}

template <typename T>
void check_matrix(const Tensor<T>& t, const char* what) {
  if (t.rank() != 2 || t.dim(0) == 0 || t.dim(1) == 0) {
    throw DimensionError(std::string(what) + " expects a nonempty [N,K] matrix, got " + shape_string(t.shape()));
  }
}

// ln p with 0 ln 0 taken as 0.
template <typename T>
T safe_log(T p) {
  return p > T(0) ? std::log(p) : T(0);
}

}  // namespace

template <typename T>
Tensor<T> sharpen(const Tensor<T>& logits, double temperature) {
  if (!(temperature > 0.0)) {
    throw ContractError("sharpening temperature must be positive, got " + std::to_string(temperature));
  }
  return grad::kernels::softmax(logits, temperature);
}

ThresholdPolicy::ThresholdPolicy(ThresholdMode mode, double tau, std::size_t classes, std::size_t unlabeled_size)
    : mode_(mode), tau_(tau), thresholds_(classes, tau), latest_(unlabeled_size, -1) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw ContractError("threshold tau must lie in [0, 1]");
  if (classes < 2) throw ContractError("threshold policy needs at least 2 classes");
  if (mode == ThresholdMode::kCpl) refresh();
}

void ThresholdPolicy::observe(std::span<const std::size_t> indices, std::span<const BranchDecision> decisions) {
  if (mode_ != ThresholdMode::kCpl) return;
  if (indices.size() != decisions.size()) {
    throw DimensionError("threshold policy: indices and decisions differ in length");
  }
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= latest_.size()) throw ContractError("threshold policy: unlabeled index out of range");
    if (decisions[i].predicted >= thresholds_.size()) throw ContractError("threshold policy: class out of range");
    if (decisions[i].confidence >= tau_) latest_[indices[i]] = static_cast<std::int64_t>(decisions[i].predicted);
  }
}

std::vector<std::size_t> ThresholdPolicy::counts() const {
  std::vector<std::size_t> c(thresholds_.size(), 0);
  for (std::int64_t v : latest_) {
    if (v >= 0) ++c[static_cast<std::size_t>(v)];
  }
  return c;
}

std::size_t ThresholdPolicy::unused() const {
  return static_cast<std::size_t>(std::count(latest_.begin(), latest_.end(), std::int64_t{-1}));
}

void ThresholdPolicy::refresh() {
  if (mode_ != ThresholdMode::kCpl) return;
  thresholds_ = cpl_update_thresholds(counts(), unused(), tau_);
}

void ThresholdPolicy::restore(std::vector<std::int64_t> latest, std::vector<double> thresholds) {
  if (latest.size() != latest_.size() || thresholds.size() != thresholds_.size()) {
    throw ContractError("threshold policy state does not match its dimensions");
  }
  for (std::int64_t v : latest) {
    if (v < -1 || v >= static_cast<std::int64_t>(thresholds_.size())) {
      throw ContractError("threshold policy state holds an invalid class");
    }
  }
  latest_ = std::move(latest);
  thresholds_ = std::move(thresholds);
}

std::vector<double> cpl_update_thresholds(std::span<const std::size_t> counts, std::size_t unused, double tau) {
  std::size_t denom = unused;
  for (std::size_t c : counts) denom = std::max(denom, c);
  std::vector<double> out(counts.size(), tau);
  if (denom == 0) return out;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    const double beta = static_cast<double>(counts[c]) / static_cast<double>(denom);
    out[c] = beta * tau;
  }
  return out;
}

template <typename T>
std::vector<BranchDecision> select_branches(const Tensor<T>& probs, const ThresholdPolicy& policy) {
  check_matrix(probs, "select_branches");
  const std::size_t n = probs.dim(0);
  const std::size_t k = probs.dim(1);
  if (k != policy.classes()) {
    throw DimensionError("select_branches: " + std::to_string(k) + " columns for a policy over " +
                         std::to_string(policy.classes()) + " classes");
  }
  std::vector<BranchDecision> out(n);
  const auto q = probs.data();
  for (std::size_t b = 0; b < n; ++b) {
    const T* row = q.data() + b * k;
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      if (!(row[j] >= T(0))) throw ContractError("select_branches: row " + std::to_string(b) + " has a negative entry");
      total += static_cast<double>(row[j]);
    }
    if (std::fabs(total - 1.0) > 1e-4) {
      throw ContractError("select_branches: row " + std::to_string(b) + " sums to " + std::to_string(total) +
                          ", not a probability vector");
    }
    const std::size_t arg = static_cast<std::size_t>(std::max_element(row, row + k) - row);
    T conf = row[arg];
    if (total != 1.0) conf = static_cast<T>(static_cast<double>(conf) / total);
    BranchDecision& d = out[b];
    d.predicted = arg;
    d.confidence = static_cast<double>(conf);
    d.threshold = policy.threshold(arg);
    d.branch = conf >= static_cast<T>(d.threshold) ? Branch::kHard : Branch::kSoft;
  }
  return out;
}

std::string ablation_name(AblationMode mode) {
  switch (mode) {
    case AblationMode::kHardOnly: return "hard_only";
    case AblationMode::kSoftOnly: return "soft_only";
    case AblationMode::kBoth: return "both";
  }
  return "both";
}

AblationMode parse_ablation(const std::string& text) {
  std::string s;
  for (char c : text) s.push_back(c == '-' ? '_' : static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  if (s == "hard_only") return AblationMode::kHardOnly;
  if (s == "soft_only") return AblationMode::kSoftOnly;
  if (s == "both") return AblationMode::kBoth;
  throw ConfigError("unknown ablation mode '" + text + "' (expected hard_only, soft_only or both)");
}

MaskStats mask_and_utilization(std::span<const BranchDecision> decisions, const ObjectiveConfig& config) {
  MaskStats s;
  for (const BranchDecision& d : decisions) (d.branch == Branch::kHard ? s.hard : s.soft)++;
  if (decisions.empty()) return s;
  s.mask_ratio = static_cast<double>(s.soft) / static_cast<double>(decisions.size());
  switch (config.mode) {
    case AblationMode::kBoth: s.utilization = 1.0; break;
    case AblationMode::kHardOnly: s.utilization = 1.0 - s.mask_ratio; break;
    case AblationMode::kSoftOnly: s.utilization = config.soft_only_all_samples ? 1.0 : s.mask_ratio; break;
  }
  return s;
}

std::vector<bool> ce_rows(std::span<const BranchDecision> decisions, const ObjectiveConfig& config) {
  std::vector<bool> rows(decisions.size(), false);
  if (config.mode == AblationMode::kSoftOnly) return rows;
  for (std::size_t b = 0; b < decisions.size(); ++b) rows[b] = decisions[b].branch == Branch::kHard;
  return rows;
}

std::vector<bool> kl_rows(std::span<const BranchDecision> decisions, const ObjectiveConfig& config) {
  std::vector<bool> rows(decisions.size(), false);
  if (config.mode == AblationMode::kHardOnly) return rows;
  const bool all = config.mode == AblationMode::kSoftOnly && config.soft_only_all_samples;
  for (std::size_t b = 0; b < decisions.size(); ++b) rows[b] = all || decisions[b].branch == Branch::kSoft;
  return rows;
}

template <typename T>
Var<T> supervised_loss(Var<T> logits, std::span<const std::size_t> labels) {
  check_matrix(logits.value(), "supervised_loss");
  check_rows(logits.shape()[0], labels.size(), "supervised_loss");
  const std::size_t k = logits.shape()[1];
  for (std::size_t y : labels) {
    if (y >= k) throw ContractError("label " + std::to_string(y) + " outside [0, " + std::to_string(k) + ")");
  }
  const Var<T> picked = grad::gather(grad::log_softmax(logits, 1), labels);
  return grad::div_scalar(grad::scale(grad::sum(picked), -1.0), static_cast<double>(labels.size()));
}

template <typename T>
Var<T> unsupervised_ce(std::span<const BranchDecision> decisions, const std::vector<bool>& rows,
                       Var<T> strong_logits) {
  check_matrix(strong_logits.value(), "unsupervised_ce");
  const std::size_t n = strong_logits.shape()[0];
  check_rows(n, decisions.size(), "unsupervised_ce");
  check_rows(n, rows.size(), "unsupervised_ce");
  std::vector<std::size_t> targets(n);
  Tensor<T> mask(Shape{n});
  for (std::size_t b = 0; b < n; ++b) {
    targets[b] = decisions[b].predicted;
    mask[b] = rows[b] ? T(1) : T(0);
  }
  grad::Tape<T>& tape = *strong_logits.tape;
  const Var<T> picked = grad::gather(grad::log_softmax(strong_logits, 1), targets);
  const Var<T> masked = grad::mul(picked, tape.constant(std::move(mask)));
  return grad::div_scalar(grad::scale(grad::sum(masked), -1.0), static_cast<double>(n));
}

template <typename T>
Var<T> kl_loss(const std::vector<bool>& rows, const Tensor<T>& weak_logits, Var<T> strong_logits,
               double temperature) {
  check_matrix(strong_logits.value(), "kl_loss");
  if (weak_logits.shape() != strong_logits.shape()) {
    throw DimensionError("kl_loss: weak logits " + shape_string(weak_logits.shape()) + " vs strong logits " +
                         shape_string(strong_logits.shape()));
  }
  const std::size_t n = weak_logits.dim(0);
  const std::size_t k = weak_logits.dim(1);
  check_rows(n, rows.size(), "kl_loss");
  Tensor<T> target = sharpen(weak_logits, temperature);
  Tensor<T> log_target(target.shape());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t j = 0; j < k; ++j) {
      T& p = target[b * k + j];
      if (!rows[b]) p = T(0);
      log_target[b * k + j] = safe_log(p);
    }
  }
  grad::Tape<T>& tape = *strong_logits.tape;
  const Var<T> diff = grad::sub(tape.constant(std::move(log_target)), grad::log_softmax(strong_logits, 1));
  const Var<T> terms = grad::mul(tape.constant(std::move(target)), diff);
  return grad::div_scalar(grad::sum(terms), static_cast<double>(n));
}

template <typename T>
UnsupervisedValues fused_unsupervised(std::span<const BranchDecision> decisions, const Tensor<T>& weak_logits,
                                      const Tensor<T>& strong_logits, const ObjectiveConfig& config) {
  check_matrix(strong_logits, "fused_unsupervised");
  if (weak_logits.shape() != strong_logits.shape()) {
    throw DimensionError("fused_unsupervised: weak and strong logits differ in shape");
  }
  const std::size_t n = strong_logits.dim(0);
  const std::size_t k = strong_logits.dim(1);
  check_rows(n, decisions.size(), "fused_unsupervised");
  const std::vector<bool> ce = ce_rows(decisions, config);
  const std::vector<bool> kl = kl_rows(decisions, config);
  const Tensor<T> log_q = grad::kernels::log_softmax(strong_logits, 1);
  const Tensor<T> target = sharpen(weak_logits, config.temperature);
  ExactSum ce_acc;
  ExactSum kl_acc;
  for (std::size_t b = 0; b < n; ++b) {
    if (ce[b]) ce_acc.add(static_cast<double>(log_q[b * k + decisions[b].predicted]));
    if (kl[b]) {
      for (std::size_t j = 0; j < k; ++j) {
        const T p = target[b * k + j];
        const T d = safe_log(p) - log_q[b * k + j];
        kl_acc.add(static_cast<double>(p * d));
      }
    }
  }
  // Same rounding steps as the recorded sum / scale / div_scalar chain.
  const T nn = static_cast<T>(n);
  T ce_v = static_cast<T>(ce_acc.value());
  ce_v *= static_cast<T>(-1.0);
  ce_v /= nn;
  T kl_v = static_cast<T>(kl_acc.value());
  kl_v /= nn;
  return {static_cast<double>(ce_v), static_cast<double>(kl_v)};
}

LossBreakdown total_loss(double loss_sup, double loss_unsup_ce, double loss_kl, double lambda_u) {
  if (!std::isfinite(loss_sup) || !std::isfinite(loss_unsup_ce) || !std::isfinite(loss_kl) ||
      !std::isfinite(lambda_u)) {
    throw NumericError("non-finite loss component");
  }
  LossBreakdown out;
  out.loss_sup = loss_sup;
  out.loss_unsup_ce = loss_unsup_ce;
  out.loss_kl = loss_kl;
  out.lambda_u = lambda_u;
  out.loss_total = loss_sup + lambda_u * (loss_unsup_ce + loss_kl);
  return out;
}

template <typename T>
ObjectiveResult<T> compute_objective(Var<T> labeled_logits, std::span<const std::size_t> labels,
                                     const Tensor<T>& weak_logits, Var<T> strong_logits,
                                     const ThresholdPolicy& policy, const ObjectiveConfig& config) {
  if (labeled_logits.tape != strong_logits.tape) throw ContractError("objective operands live on different tapes");
  grad::Tape<T>& tape = *strong_logits.tape;
  ObjectiveResult<T> r;
  r.decisions = select_branches(sharpen(weak_logits, 1.0), policy);
  const Var<T> ls = supervised_loss(labeled_logits, labels);
  const Var<T> zero = tape.constant(Tensor<T>::scalar(T(0)));
  const Var<T> lce = config.mode == AblationMode::kSoftOnly
                         ? zero
                         : unsupervised_ce<T>(r.decisions, ce_rows(r.decisions, config), strong_logits);
  const Var<T> lkl = config.mode == AblationMode::kHardOnly
                         ? zero
                         : kl_loss(kl_rows(r.decisions, config), weak_logits, strong_logits, config.temperature);
  r.total = grad::add(ls, grad::scale(grad::add(lce, lkl), config.lambda_u));
  r.breakdown.loss_sup = static_cast<double>(ls.value().item());
  r.breakdown.loss_unsup_ce = static_cast<double>(lce.value().item());
  r.breakdown.loss_kl = static_cast<double>(lkl.value().item());
  r.breakdown.loss_total = static_cast<double>(r.total.value().item());
  r.breakdown.lambda_u = config.lambda_u;
  const MaskStats m = mask_and_utilization(r.decisions, config);
  r.breakdown.mask_ratio = m.mask_ratio;
  r.breakdown.utilization = m.utilization;
  r.breakdown.hard_count = m.hard;
  r.breakdown.soft_count = m.soft;
  return r;
}

#define REFIX_INSTANTIATE_OBJECTIVE(T)                                                                     \
  template Tensor<T> sharpen(const Tensor<T>&, double);                                                    \
  template std::vector<BranchDecision> select_branches(const Tensor<T>&, const ThresholdPolicy&);          \
  template Var<T> supervised_loss(Var<T>, std::span<const std::size_t>);                                   \
  template Var<T> unsupervised_ce(std::span<const BranchDecision>, const std::vector<bool>&, Var<T>);      \
  template Var<T> kl_loss(const std::vector<bool>&, const Tensor<T>&, Var<T>, double);                     \
  template UnsupervisedValues fused_unsupervised(std::span<const BranchDecision>, const Tensor<T>&,         \
                                                 const Tensor<T>&, const ObjectiveConfig&);                \
  template ObjectiveResult<T> compute_objective(Var<T>, std::span<const std::size_t>, const Tensor<T>&,    \
                                                Var<T>, const ThresholdPolicy&, const ObjectiveConfig&);

REFIX_INSTANTIATE_OBJECTIVE(float)
REFIX_INSTANTIATE_OBJECTIVE(double)

}  // namespace refix::objective
