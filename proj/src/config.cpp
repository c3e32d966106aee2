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

#include "refix/config.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

namespace refix::config {

namespace fs = std::filesystem;

const std::vector<KeyInfo>& known_keys() {
  static const std::vector<KeyInfo> keys = {
      // paths
      {"out_dir", "out", "output directory of the command"},
      {"dataset", "", "dataset manifest read by split, augment-preview, eval and calibrate"},
      {"labeled", "", "labeled manifest for train"},
      {"unlabeled", "", "unlabeled manifest for train"},
      {"eval", "", "evaluation manifest for train"},
      {"checkpoint", "", "checkpoint manifest or directory for eval and calibrate"},
      {"seed", "0", "seed of generation, splitting and training (RFX_SEED overrides)"},
      // synthetic data
      {"kind", "shapes", "synthetic family: shapes or moons-img"},
      {"classes", "10", "number of classes generated"},
      {"count", "6000", "number of samples generated"},
      {"size", "16", "image height and width"},
      {"channels", "1", "image channels"},
      {"stem", "data", "file stem of generated datasets"},
      // split
      {"split", "balanced", "balanced or long_tailed"},
      {"per_class", "4", "labeled samples per class of a balanced split"},
      {"n1", "1000", "head class size of a long-tailed split"},
      {"imbalance", "100", "imbalance ratio of a long-tailed split"},
      {"labeled_fraction", "0.2", "labeled fraction of every long-tailed class"},
      // model
      {"arch", "smallconv", "smallconv or mlp"},
      {"widths", "16,32", "channel widths (smallconv) or hidden widths (mlp)"},
      {"norm_mean", "0.5", "per-channel input mean, one value or one per channel"},
      {"norm_std", "0.25", "per-channel input std, one value or one per channel"},
      // training
      {"iterations", "20000", "total optimizer steps"},
      {"batch", "64", "labeled batch size"},
      {"mu", "7", "unlabeled to labeled batch ratio"},
      {"lr", "0.03", "initial learning rate"},
      {"momentum", "0.9", "SGD momentum"},
      {"weight_decay", "0.0005", "weight decay added to the velocity"},
      {"ema_momentum", "0.999", "EMA decay of the evaluation weights"},
      {"tau", "0.95", "confidence threshold"},
      {"temperature", "0.5", "sharpening temperature of the KL target"},
      {"lambda_u", "1", "unlabeled loss weight"},
      {"ablation", "both", "hard_only, soft_only or both"},
      {"soft_only_all", "false", "soft_only applies KL to every unlabeled sample"},
      {"threshold", "fixed", "fixed or cpl"},
      {"cpl_refresh", "1", "iterations between class threshold refreshes"},
      {"n_ops", "2", "RandAugment operations per strong view"},
      {"cutout", "true", "append Cutout to strong views"},
      {"workers", "1", "augmentation threads"},
      {"log_interval", "100", "iterations between log rows"},
      {"eval_interval", "1000", "iterations between evaluations"},
      {"median_window", "20", "evaluations in the reported median error"},
      {"checkpoint_interval", "0", "iterations between extra checkpoints, 0 keeps only the final one"},
      // metrics and preview
      {"bins", "10", "calibration bins"},
      {"preview_count", "8", "images written by augment-preview"},
  };
  return keys;
}

namespace {

bool is_known(const std::string& key) {
  const auto& keys = known_keys();
  return std::any_of(keys.begin(), keys.end(), [&](const KeyInfo& k) { return key == k.key; });
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw ConfigError("key '" + key + "': expected " + expected + ", got '" + value + "'");
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) bad_value(key, v, "a nonnegative integer");
  errno = 0;
  const unsigned long long r = std::strtoull(v.c_str(), nullptr, 10);
  if (errno == ERANGE) bad_value(key, v, "an integer below 2^64");
  return r;
}

double parse_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  errno = 0;
  const double r = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE || !std::isfinite(r)) {
    bad_value(key, v, "a finite number");
  }
  return r;
}

}  // namespace

RunConfig::RunConfig() {
  for (const KeyInfo& k : known_keys()) values_[k.key] = k.default_value;
}

RunConfig RunConfig::from_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  RunConfig config;
  config.merge_text(ss.str(), path.string());
  return config;
}

void RunConfig::merge_text(const std::string& text, const std::string& origin) {
  std::set<std::string> seen;
  std::stringstream ss(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(ss, line)) {
    ++number;
    const std::string body = trim(line);
    if (body.empty() || body[0] == '#') continue;
    const auto eq = body.find('=');
    const std::string where = origin + ":" + std::to_string(number);
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    const std::string key = trim(body.substr(0, eq));
    if (!seen.insert(key).second) throw ConfigError(where + ": key '" + key + "' given twice");
    try {
      set(key, trim(body.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (!is_known(key)) throw ConfigError("unknown key '" + key + "'");
  values_[key] = value;
}

void RunConfig::set_assignment(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void RunConfig::apply_environment() {
  const char* seed = std::getenv("RFX_SEED");
  if (seed == nullptr || *seed == '\0') return;
  parse_u64("RFX_SEED", seed);
  values_["seed"] = seed;
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown key '" + key + "'");
  return it->second;
}

std::uint64_t RunConfig::get_u64(const std::string& key) const { return parse_u64(key, get(key)); }

std::size_t RunConfig::get_size(const std::string& key) const { return static_cast<std::size_t>(get_u64(key)); }

double RunConfig::get_double(const std::string& key) const { return parse_double(key, get(key)); }

bool RunConfig::get_bool(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(key, v, "true or false");
}

std::vector<std::size_t> RunConfig::get_sizes(const std::string& key) const {
  std::vector<std::size_t> out;
  for (const std::string& cell : split_commas(get(key))) out.push_back(static_cast<std::size_t>(parse_u64(key, cell)));
  if (out.empty()) bad_value(key, get(key), "a comma-separated list");
  return out;
}

std::vector<double> RunConfig::get_doubles(const std::string& key) const {
  std::vector<double> out;
  for (const std::string& cell : split_commas(get(key))) out.push_back(parse_double(key, cell));
  if (out.empty()) bad_value(key, get(key), "a comma-separated list");
  return out;
}

std::string RunConfig::resolved() const {
  std::string out;
  for (const auto& [key, value] : values_) out += key + " = " + value + "\n";
  return out;
}

void RunConfig::write_resolved(const fs::path& path) const {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << resolved();
  if (!out) throw DataError("cannot write " + path.string());
}

trainer::TrainConfig train_config(const RunConfig& c) {
  trainer::TrainConfig t;
  t.iterations = c.get_size("iterations");
  t.batch = c.get_size("batch");
  t.mu = c.get_size("mu");
  t.lr = c.get_double("lr");
  t.momentum = c.get_double("momentum");
  t.weight_decay = c.get_double("weight_decay");
  t.ema_momentum = c.get_double("ema_momentum");
  t.objective.tau = c.get_double("tau");
  t.objective.temperature = c.get_double("temperature");
  t.objective.lambda_u = c.get_double("lambda_u");
  t.objective.mode = objective::parse_ablation(c.get("ablation"));
  t.objective.soft_only_all_samples = c.get_bool("soft_only_all");
  const std::string& threshold = c.get("threshold");
  if (threshold == "fixed") {
    t.threshold_mode = objective::ThresholdMode::kFixed;
  } else if (threshold == "cpl") {
    t.threshold_mode = objective::ThresholdMode::kCpl;
  } else {
    bad_value("threshold", threshold, "fixed or cpl");
  }
  t.cpl_refresh_interval = c.get_size("cpl_refresh");
  t.augment.n_ops = c.get_size("n_ops");
  t.augment.cutout = c.get_bool("cutout");
  t.augment.workers = c.get_size("workers");
  t.log_interval = c.get_size("log_interval");
  t.eval_interval = c.get_size("eval_interval");
  t.median_window = c.get_size("median_window");
  t.calibration_bins = c.get_size("bins");
  t.seed = c.get_u64("seed");
  t.validate();
  return t;
}

models::ModelSpec model_spec(const RunConfig& c, const data::Dataset& reference) {
  models::ModelSpec spec;
  spec.arch = [&] {
    try {
      return models::parse_arch(c.get("arch"));
    } catch (const Error&) {
      bad_value("arch", c.get("arch"), "smallconv or mlp");
    }
  }();
  spec.widths = c.get_sizes("widths");
  spec.norm_mean = c.get_doubles("norm_mean");
  spec.norm_std = c.get_doubles("norm_std");
  spec.channels = reference.channels();
  spec.height = reference.height();
  spec.width = reference.width();
  spec.classes = reference.classes;
  try {
    spec.validate();
  } catch (const ContractError& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  return spec;
}

}  // namespace refix::config
