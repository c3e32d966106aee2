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
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "refix/data.hpp"
#include "refix/exact_sum.hpp"
#include "refix/objective.hpp"
#include "refix/tensor.hpp"

namespace refix::metrics {

// Percentage of rows whose label is outside the k highest-probability
// classes. A label tied with the k-th score counts as inside.
double topk_error(const Tensor<double>& probs, std::span<const std::size_t> labels, std::size_t k);

// counts[true][predicted]
struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::uint64_t> counts;

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t k) : classes(k), counts(k * k, 0) {}

  void add(std::size_t truth, std::size_t predicted);
  std::uint64_t at(std::size_t truth, std::size_t predicted) const { return counts[truth * classes + predicted]; }
  std::uint64_t total() const;
  void merge(const ConfusionMatrix& other);

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

struct PrfScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::vector<double> class_precision;
  std::vector<double> class_recall;
  std::vector<double> class_f1;
};

// Macro (unweighted) means; a class with an empty denominator scores 0.
PrfScores macro_prf(const ConfusionMatrix& confusion);

// diagonal / row sum; absent for classes with no samples.
std::vector<std::optional<double>> class_accuracy(const ConfusionMatrix& confusion);

struct AucResult {
  std::optional<double> macro;         // absent when every class was skipped
  std::vector<double> per_class;       // NaN for skipped classes
  std::vector<std::size_t> skipped;    // classes with no positives or no negatives
};

// One-vs-rest AUC per class from pair counting, ties weighted 1/2.
AucResult ovr_auc(const Tensor<double>& scores, std::span<const std::size_t> labels);

struct CalibrationBin {
  double lower = 0.0;
  double upper = 0.0;
  std::uint64_t count = 0;
  double mean_confidence = 0.0;
  double accuracy = 0.0;
  double weight = 0.0;  // count / total
};

struct CalibrationResult {
  double ece = 0.0;  // x100
  std::vector<CalibrationBin> bins;
};

// Equal-width bins on (0, 1]: bin m holds (m/M, (m+1)/M]; confidence 0 goes
// to the first bin. ECE = sum_m (n_m/N) |acc_m - conf_m|, scaled by 100.
// Throws ContractError for confidences outside [0, 1].
CalibrationResult ece(std::span<const double> confidences, std::span<const std::uint8_t> correct,
                      std::size_t bins = 10);

std::size_t calibration_bin(double confidence, std::size_t bins);

// Recomputes ECE (x100) from a bins CSV written by bins_csv.
double ece_from_bins_csv(const std::string& csv);

struct MetricReport {
  std::size_t samples = 0;
  std::size_t classes = 0;
  double top1_error = 0.0;
  double top5_error = 0.0;
  PrfScores prf;
  AucResult auc;
  CalibrationResult calibration;
  ConfusionMatrix confusion;
  std::vector<std::optional<double>> class_accuracy;
};

// Streaming evaluation state. merge() is associative and commutative and
// finalize() depends only on the multiset of added rows, so sharded
// accumulation reproduces a single stream exactly.
class MetricAccumulator {
 public:
  MetricAccumulator() = default;
  MetricAccumulator(std::size_t classes, std::size_t bins = 10);

  // probs: [N,K] probability rows.
  void add(const Tensor<double>& probs, std::span<const std::size_t> labels);
  void merge(const MetricAccumulator& other);
  MetricReport finalize() const;

  std::size_t samples() const { return labels_.size(); }
  std::size_t classes() const { return classes_; }

 private:
  std::size_t classes_ = 0;
  std::size_t bins_ = 10;
  std::uint64_t top1_miss_ = 0;
  std::uint64_t top5_miss_ = 0;
  ConfusionMatrix confusion_;
  std::vector<std::uint64_t> bin_count_;
  std::vector<std::uint64_t> bin_correct_;
  std::vector<ExactSum> bin_confidence_;
  std::vector<double> scores_;  // row-major [samples, classes]
  std::vector<std::size_t> labels_;
};

std::string to_json(const MetricReport& report, int indent = 2);
std::string bins_csv(const CalibrationResult& calibration);
// Confidence histogram: bin,lower,upper,count,fraction
std::string histogram_csv(const CalibrationResult& calibration);

// Fraction of confident (HARD) decisions whose pseudo-label is right.
struct PseudoLabelTally {
  std::uint64_t correct = 0;
  std::uint64_t total = 0;

  // Absent, not zero, when there were no confident decisions.
  std::optional<double> value() const;
  void merge(const PseudoLabelTally& other) {
    correct += other.correct;
    total += other.total;
  }
};

// The only reader of hidden unlabeled ground truth.
struct PseudoLabelAccess {
  // decisions[i] belongs to unlabeled sample indices[i].
  static PseudoLabelTally tally(std::span<const objective::BranchDecision> decisions,
                                std::span<const std::size_t> indices, const data::HiddenTruth& truth);
};

inline std::optional<double> pseudo_label_accuracy(std::span<const objective::BranchDecision> decisions,
                                                   std::span<const std::size_t> indices,
                                                   const data::HiddenTruth& truth) {
  return PseudoLabelAccess::tally(decisions, indices, truth).value();
}

}  // namespace refix::metrics
