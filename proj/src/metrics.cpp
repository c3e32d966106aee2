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

#include "refix/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <json.hpp>
#include <sstream>

namespace refix::metrics {

namespace {

void check_probs(const Tensor<double>& probs, std::span<const std::size_t> labels, const char* what) {
  if (probs.rank() != 2) {
    throw DimensionError(std::string(what) + " expects [N,K] scores, got " + shape_string(probs.shape()));
  }
  if (probs.dim(0) != labels.size()) {
    throw DimensionError(std::string(what) + ": " + std::to_string(probs.dim(0)) + " rows but " +
                         std::to_string(labels.size()) + " labels");
  }
  for (std::size_t y : labels) {
    if (y >= probs.dim(1)) throw ContractError(std::string(what) + ": label " + std::to_string(y) + " out of range");
  }
}

// Classes scoring strictly above the label's score.
std::size_t rank_of_label(const double* row, std::size_t k, std::size_t label) {
  std::size_t above = 0;
  for (std::size_t j = 0; j < k; ++j) above += row[j] > row[label];
  return above;
}

std::size_t argmax(const double* row, std::size_t k) {
  return static_cast<std::size_t>(std::max_element(row, row + k) - row);
}

double safe_div(double num, double den) { return den == 0.0 ? 0.0 : num / den; }

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

// AUC of one class from its scores: 2 * concordant pairs counted exactly.
std::optional<double> class_auc(std::vector<std::pair<double, bool>> scored) {
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::uint64_t pos = 0;
  std::uint64_t neg = 0;
  for (const auto& s : scored) (s.second ? pos : neg)++;
  if (pos == 0 || neg == 0) return std::nullopt;
  // pairs twice counted: each positive gets 2 per lower negative and 1 per tied negative
  unsigned __int128 twice = 0;
  std::uint64_t neg_below = 0;
  for (std::size_t i = 0; i < scored.size();) {
    std::size_t j = i;
    std::uint64_t pos_g = 0;
    std::uint64_t neg_g = 0;
    while (j < scored.size() && scored[j].first == scored[i].first) {
      (scored[j].second ? pos_g : neg_g)++;
      ++j;
    }
    twice += static_cast<unsigned __int128>(pos_g) * (2 * neg_below + neg_g);
    neg_below += neg_g;
    i = j;
  }
  const long double denom = 2.0L * static_cast<long double>(pos) * static_cast<long double>(neg);
  return static_cast<double>(static_cast<long double>(twice) / denom);
}

}  // namespace

double topk_error(const Tensor<double>& probs, std::span<const std::size_t> labels, std::size_t k) {
  check_probs(probs, labels, "topk_error");
  if (k == 0 || k > probs.dim(1)) throw ContractError("topk_error: k must lie in [1, K]");
  if (labels.empty()) return 0.0;
  const std::size_t classes = probs.dim(1);
  std::uint64_t miss = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) miss += rank_of_label(probs.data().data() + i * classes, classes, labels[i]) >= k;
  return 100.0 * static_cast<double>(miss) / static_cast<double>(labels.size());
}

void ConfusionMatrix::add(std::size_t truth, std::size_t predicted) {
  if (truth >= classes || predicted >= classes) throw ContractError("confusion matrix index out of range");
  ++counts[truth * classes + predicted];
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (auto c : counts) t += c;
  return t;
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.classes != classes) throw ContractError("merging confusion matrices of different sizes");
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
}

PrfScores macro_prf(const ConfusionMatrix& confusion) {
  const std::size_t k = confusion.classes;
  if (k < 2) throw ContractError("macro_prf needs at least 2 classes");
  PrfScores s;
  s.class_precision.resize(k);
  s.class_recall.resize(k);
  s.class_f1.resize(k);
  for (std::size_t c = 0; c < k; ++c) {
    std::uint64_t row = 0;
    std::uint64_t col = 0;
    for (std::size_t j = 0; j < k; ++j) {
      row += confusion.at(c, j);
      col += confusion.at(j, c);
    }
    const double tp = static_cast<double>(confusion.at(c, c));
    const double p = safe_div(tp, static_cast<double>(col));
    const double r = safe_div(tp, static_cast<double>(row));
    s.class_precision[c] = p;
    s.class_recall[c] = r;
    s.class_f1[c] = safe_div(2.0 * p * r, p + r);
  }
  auto mean = [k](const std::vector<double>& v) {
    ExactSum acc;
    for (double x : v) acc.add(x);
    return acc.value() / static_cast<double>(k);
  };
  s.precision = mean(s.class_precision);
  s.recall = mean(s.class_recall);
  s.f1 = mean(s.class_f1);
  return s;
}

std::vector<std::optional<double>> class_accuracy(const ConfusionMatrix& confusion) {
  std::vector<std::optional<double>> out(confusion.classes);
  for (std::size_t c = 0; c < confusion.classes; ++c) {
    std::uint64_t row = 0;
    for (std::size_t j = 0; j < confusion.classes; ++j) row += confusion.at(c, j);
    if (row > 0) out[c] = static_cast<double>(confusion.at(c, c)) / static_cast<double>(row);
  }
  return out;
}

AucResult ovr_auc(const Tensor<double>& scores, std::span<const std::size_t> labels) {
  check_probs(scores, labels, "ovr_auc");
  const std::size_t k = scores.dim(1);
  AucResult r;
  r.per_class.assign(k, std::numeric_limits<double>::quiet_NaN());
  ExactSum total;
  std::size_t used = 0;
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<std::pair<double, bool>> scored(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) scored[i] = {scores[i * k + c], labels[i] == c};
    const auto auc = class_auc(std::move(scored));
    if (!auc) {
      r.skipped.push_back(c);
      continue;
    }
    r.per_class[c] = *auc;
    total.add(*auc);
    ++used;
  }
  if (used > 0) r.macro = total.value() / static_cast<double>(used);
  return r;
}

std::size_t calibration_bin(double confidence, std::size_t bins) {
  if (!(confidence >= 0.0 && confidence <= 1.0)) {
    throw ContractError("confidence " + std::to_string(confidence) + " outside [0, 1]");
  }
  const double scaled = std::ceil(confidence * static_cast<double>(bins));
  return scaled <= 1.0 ? 0 : std::min(bins - 1, static_cast<std::size_t>(scaled) - 1);
}

namespace {

CalibrationResult calibration_from(std::size_t bins, std::span<const std::uint64_t> count,
                                   std::span<const std::uint64_t> correct, std::span<const ExactSum> confidence) {
  CalibrationResult r;
  r.bins.resize(bins);
  std::uint64_t total = 0;
  for (auto c : count) total += c;
  ExactSum gap;
  for (std::size_t m = 0; m < bins; ++m) {
    CalibrationBin& b = r.bins[m];
    b.lower = static_cast<double>(m) / static_cast<double>(bins);
    b.upper = static_cast<double>(m + 1) / static_cast<double>(bins);
    b.count = count[m];
    if (count[m] == 0) continue;
    const double n = static_cast<double>(count[m]);
    const double conf_sum = confidence[m].value();
    b.mean_confidence = conf_sum / n;
    b.accuracy = static_cast<double>(correct[m]) / n;
    b.weight = n / static_cast<double>(total);
    // n_m/N * |acc_m - conf_m| * 100 == |100 c_m - 100 S_m| / N
    gap.add(std::fabs(100.0 * static_cast<double>(correct[m]) - 100.0 * conf_sum));
  }
  r.ece = total == 0 ? 0.0 : gap.value() / static_cast<double>(total);
  return r;
}

}  // namespace

CalibrationResult ece(std::span<const double> confidences, std::span<const std::uint8_t> correct, std::size_t bins) {
  if (bins == 0) throw ContractError("calibration needs at least one bin");
  if (confidences.size() != correct.size()) throw DimensionError("ece: confidences and correctness differ in length");
  std::vector<std::uint64_t> count(bins, 0);
  std::vector<std::uint64_t> right(bins, 0);
  std::vector<ExactSum> conf(bins);
  for (std::size_t i = 0; i < confidences.size(); ++i) {
    const std::size_t m = calibration_bin(confidences[i], bins);
    ++count[m];
    right[m] += correct[i] != 0;
    conf[m].add(confidences[i]);
  }
  return calibration_from(bins, count, right, conf);
}

std::string bins_csv(const CalibrationResult& calibration) {
  std::ostringstream out;
  out << "bin,lower,upper,count,mean_confidence,accuracy,weight\n";
  for (std::size_t m = 0; m < calibration.bins.size(); ++m) {
    const CalibrationBin& b = calibration.bins[m];
    out << m << ',' << fmt17(b.lower) << ',' << fmt17(b.upper) << ',' << b.count << ',' << fmt17(b.mean_confidence)
        << ',' << fmt17(b.accuracy) << ',' << fmt17(b.weight) << '\n';
  }
  return out.str();
}

std::string histogram_csv(const CalibrationResult& calibration) {
  std::ostringstream out;
  out << "bin,lower,upper,count,fraction\n";
  for (std::size_t m = 0; m < calibration.bins.size(); ++m) {
    const CalibrationBin& b = calibration.bins[m];
    out << m << ',' << fmt17(b.lower) << ',' << fmt17(b.upper) << ',' << b.count << ',' << fmt17(b.weight) << '\n';
  }
  return out.str();
}

double ece_from_bins_csv(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line) || line.rfind("bin,", 0) != 0) throw FormatError("bins CSV lacks its header");
  double total = 0.0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != 7) throw FormatError("bins CSV row has " + std::to_string(cells.size()) + " cells");
    total += std::stod(cells[6]) * std::fabs(std::stod(cells[5]) - std::stod(cells[4]));
  }
  return 100.0 * total;
}

MetricAccumulator::MetricAccumulator(std::size_t classes, std::size_t bins)
    : classes_(classes),
      bins_(bins),
      confusion_(classes),
      bin_count_(bins, 0),
      bin_correct_(bins, 0),
      bin_confidence_(bins) {
  if (classes < 2) throw ContractError("metrics need at least 2 classes");
  if (bins == 0) throw ContractError("calibration needs at least one bin");
}

void MetricAccumulator::add(const Tensor<double>& probs, std::span<const std::size_t> labels) {
  check_probs(probs, labels, "MetricAccumulator::add");
  if (probs.dim(1) != classes_) throw DimensionError("MetricAccumulator::add: class count mismatch");
  const std::size_t top5 = std::min<std::size_t>(5, classes_);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double* row = probs.data().data() + i * classes_;
    const std::size_t rank = rank_of_label(row, classes_, labels[i]);
    const std::size_t pred = argmax(row, classes_);
    top1_miss_ += pred != labels[i];
    top5_miss_ += rank >= top5;
    confusion_.add(labels[i], pred);
    const std::size_t m = calibration_bin(row[pred], bins_);
    ++bin_count_[m];
    bin_correct_[m] += pred == labels[i];
    bin_confidence_[m].add(row[pred]);
    scores_.insert(scores_.end(), row, row + classes_);
    labels_.push_back(labels[i]);
  }
}

void MetricAccumulator::merge(const MetricAccumulator& other) {
  if (other.classes_ != classes_ || other.bins_ != bins_) {
    throw ContractError("merging metric accumulators with different shapes");
  }
  top1_miss_ += other.top1_miss_;
  top5_miss_ += other.top5_miss_;
  confusion_.merge(other.confusion_);
  for (std::size_t m = 0; m < bins_; ++m) {
    bin_count_[m] += other.bin_count_[m];
    bin_correct_[m] += other.bin_correct_[m];
    bin_confidence_[m].merge(other.bin_confidence_[m]);
  }
  scores_.insert(scores_.end(), other.scores_.begin(), other.scores_.end());
  labels_.insert(labels_.end(), other.labels_.begin(), other.labels_.end());
}

MetricReport MetricAccumulator::finalize() const {
  MetricReport r;
  r.samples = labels_.size();
  r.classes = classes_;
  if (r.samples > 0) {
    r.top1_error = 100.0 * static_cast<double>(top1_miss_) / static_cast<double>(r.samples);
    r.top5_error = 100.0 * static_cast<double>(top5_miss_) / static_cast<double>(r.samples);
  }
  r.confusion = confusion_;
  r.prf = macro_prf(confusion_);
  r.class_accuracy = class_accuracy(confusion_);
  r.auc = ovr_auc(Tensor<double>(Shape{labels_.size(), classes_}, scores_), labels_);
  r.calibration = calibration_from(bins_, bin_count_, bin_correct_, bin_confidence_);
  return r;
}

std::string to_json(const MetricReport& report, int indent) {
  using nlohmann::json;
  json j;
  j["samples"] = report.samples;
  j["classes"] = report.classes;
  j["top1_error"] = report.top1_error;
  j["top5_error"] = report.top5_error;
  j["precision"] = report.prf.precision;
  j["recall"] = report.prf.recall;
  j["f1"] = report.prf.f1;
  j["class_precision"] = report.prf.class_precision;
  j["class_recall"] = report.prf.class_recall;
  j["class_f1"] = report.prf.class_f1;
  j["auc"] = optional_json(report.auc.macro);
  json per_class = json::array();
  for (double v : report.auc.per_class) per_class.push_back(std::isnan(v) ? json(nullptr) : json(v));
  j["class_auc"] = per_class;
  j["auc_skipped_classes"] = report.auc.skipped;
  j["ece"] = report.calibration.ece;
  json bins = json::array();
  for (const CalibrationBin& b : report.calibration.bins) {
    bins.push_back({{"lower", b.lower},
                    {"upper", b.upper},
                    {"count", b.count},
                    {"mean_confidence", b.mean_confidence},
                    {"accuracy", b.accuracy},
                    {"weight", b.weight}});
  }
  j["calibration_bins"] = bins;
  json confusion = json::array();
  for (std::size_t t = 0; t < report.confusion.classes; ++t) {
    json row = json::array();
    for (std::size_t p = 0; p < report.confusion.classes; ++p) row.push_back(report.confusion.at(t, p));
    confusion.push_back(row);
  }
  j["confusion"] = confusion;
  json acc = json::array();
  for (const auto& v : report.class_accuracy) acc.push_back(optional_json(v));
  j["class_accuracy"] = acc;
  return j.dump(indent);
}

std::optional<double> PseudoLabelTally::value() const {
  if (total == 0) return std::nullopt;
  return static_cast<double>(correct) / static_cast<double>(total);
}

PseudoLabelTally PseudoLabelAccess::tally(std::span<const objective::BranchDecision> decisions,
                                          std::span<const std::size_t> indices, const data::HiddenTruth& truth) {
  if (decisions.size() != indices.size()) throw DimensionError("pseudo-label tally: indices and decisions differ");
  if (!truth.available()) throw DataError("pseudo-label accuracy needs the unlabeled ground truth");
  const std::vector<std::size_t>& labels = truth.reveal(data::TruthKey{});
  PseudoLabelTally t;
  for (std::size_t i = 0; i < decisions.size(); ++i) {
    if (decisions[i].branch != objective::Branch::kHard) continue;
    if (indices[i] >= labels.size()) throw ContractError("pseudo-label tally: index out of range");
    ++t.total;
    t.correct += decisions[i].predicted == labels[indices[i]];
  }
  return t;
}

}  // namespace refix::metrics
