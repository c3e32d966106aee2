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

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "refix/ops.hpp"
#include "refix/tensor.hpp"

namespace refix::objective {

// p(k) = exp(z_k / T) / sum_j exp(z_j / T), row-wise over the last axis.
// Throws ContractError for T <= 0.
template <typename T>
Tensor<T> sharpen(const Tensor<T>& logits, double temperature);

enum class Branch : std::uint8_t { kHard, kSoft };

struct BranchDecision {
  double confidence = 0.0;  // max_k q(k)
  std::size_t predicted = 0;
  Branch branch = Branch::kSoft;
  double threshold = 0.0;  // effective threshold that decided the branch
};

enum class ThresholdMode : std::uint8_t { kFixed, kCpl };

// Per-class confidence thresholds. FIXED keeps every class at tau. CPL tracks
// the latest confident prediction of each unlabeled sample and rescales tau
// by the normalized per-class counts (see cpl_update_thresholds).
class ThresholdPolicy {
 public:
  ThresholdPolicy() : ThresholdPolicy(ThresholdMode::kFixed, 0.95, 2, 0) {}
  ThresholdPolicy(ThresholdMode mode, double tau, std::size_t classes, std::size_t unlabeled_size);

  ThresholdMode mode() const { return mode_; }
  double tau() const { return tau_; }
  std::size_t classes() const { return thresholds_.size(); }
  const std::vector<double>& thresholds() const { return thresholds_; }
  double threshold(std::size_t cls) const { return thresholds_.at(cls); }

  // Records the current prediction of unlabeled samples `indices` whose
  // confidence reaches tau. No-op in FIXED mode.
  void observe(std::span<const std::size_t> indices, std::span<const BranchDecision> decisions);

  // sigma(c): samples whose latest confident prediction is class c.
  std::vector<std::size_t> counts() const;
  // Samples never predicted with confidence >= tau.
  std::size_t unused() const;

  // Recomputes thresholds from the current counts. No-op in FIXED mode.
  void refresh();

  // Replaces the tracked state (checkpoint restore).
  void restore(std::vector<std::int64_t> latest, std::vector<double> thresholds);
  const std::vector<std::int64_t>& latest() const { return latest_; }

 private:
  ThresholdMode mode_;
  double tau_;
  std::vector<double> thresholds_;
  std::vector<std::int64_t> latest_;  // -1 = unused
};

// beta(c) = sigma(c) / max(max_c sigma(c), unused); T(c) = beta(c) * tau.
// When every count and unused are zero all thresholds equal tau.
std::vector<double> cpl_update_thresholds(std::span<const std::size_t> counts, std::size_t unused, double tau);

// HARD iff max q >= effective threshold, comparing in the precision of q.
// Rows whose sum is within 1e-4 of 1 are renormalized; others throw
// ContractError.
template <typename T>
std::vector<BranchDecision> select_branches(const Tensor<T>& probs, const ThresholdPolicy& policy);

enum class AblationMode : std::uint8_t { kHardOnly, kSoftOnly, kBoth };

std::string ablation_name(AblationMode mode);
// Accepts hard_only / soft_only / both (case-insensitive, '-' or '_').
AblationMode parse_ablation(const std::string& text);

struct ObjectiveConfig {
  double tau = 0.95;
  double temperature = 0.5;
  double lambda_u = 1.0;
  AblationMode mode = AblationMode::kBoth;
  // SOFT_ONLY: apply KL to every sample instead of sub-threshold ones only.
  bool soft_only_all_samples = false;
};

struct LossBreakdown {
  double loss_sup = 0.0;
  double loss_unsup_ce = 0.0;
  double loss_kl = 0.0;
  double loss_total = 0.0;
  double mask_ratio = 0.0;   // SOFT fraction
  double utilization = 0.0;  // fraction of unlabeled samples that feed a loss term
  double lambda_u = 1.0;
  std::size_t hard_count = 0;
  std::size_t soft_count = 0;
};

struct MaskStats {
  double mask_ratio = 0.0;
  double utilization = 0.0;
  std::size_t hard = 0;
  std::size_t soft = 0;
};

// mask_ratio = soft / n. Utilization: BOTH 1; HARD_ONLY 1 - mask_ratio;
// SOFT_ONLY mask_ratio, or 1 when KL covers every sample.
MaskStats mask_and_utilization(std::span<const BranchDecision> decisions, const ObjectiveConfig& config);

// Rows of the KL term for a configuration: SOFT rows, or all rows.
std::vector<bool> kl_rows(std::span<const BranchDecision> decisions, const ObjectiveConfig& config);
std::vector<bool> ce_rows(std::span<const BranchDecision> decisions, const ObjectiveConfig& config);

// (1/B) sum_b -log p(y_b). Throws ContractError for labels >= K.
template <typename T>
grad::Var<T> supervised_loss(grad::Var<T> logits, std::span<const std::size_t> labels);

// (1/n) sum over `rows` of -log p_strong(argmax q_b); n counts every row.
template <typename T>
grad::Var<T> unsupervised_ce(std::span<const BranchDecision> decisions, const std::vector<bool>& rows,
                             grad::Var<T> strong_logits);

// (1/n) sum over `rows` of KL(sharpen(weak, T) || p_strong), target detached.
template <typename T>
grad::Var<T> kl_loss(const std::vector<bool>& rows, const Tensor<T>& weak_logits, grad::Var<T> strong_logits,
                     double temperature);

// Both unsupervised terms in one pass over the batch, no tape.
struct UnsupervisedValues {
  double ce = 0.0;
  double kl = 0.0;
};
template <typename T>
UnsupervisedValues fused_unsupervised(std::span<const BranchDecision> decisions, const Tensor<T>& weak_logits,
                                      const Tensor<T>& strong_logits, const ObjectiveConfig& config);

// Fills the loss fields; loss_total = L_s + lambda_u * (L_u_ce + L_kl).
LossBreakdown total_loss(double loss_sup, double loss_unsup_ce, double loss_kl, double lambda_u);

template <typename T>
struct ObjectiveResult {
  grad::Var<T> total;
  LossBreakdown breakdown;
  std::vector<BranchDecision> decisions;
};

// The full objective on one tape. weak_logits come from a gradient-free
// forward pass and only supply targets.
template <typename T>
ObjectiveResult<T> compute_objective(grad::Var<T> labeled_logits, std::span<const std::size_t> labels,
                                     const Tensor<T>& weak_logits, grad::Var<T> strong_logits,
                                     const ThresholdPolicy& policy, const ObjectiveConfig& config);

}  // namespace refix::objective
