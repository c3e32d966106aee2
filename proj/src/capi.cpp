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

#include "refix/refix.h"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <new>
#include <string>

#include "refix/augment.hpp"
#include "refix/config.hpp"
#include "refix/data.hpp"
#include "refix/metrics.hpp"
#include "refix/trainer.hpp"

namespace fs = std::filesystem;
using namespace refix;

struct rfx_config {
  config::RunConfig cfg;
  mutable std::string resolved;
};

struct rfx_dataset {
  data::Dataset ds;
};

struct rfx_checkpoint {
  trainer::Checkpoint ck;
};

struct rfx_report {
  metrics::MetricReport report;
  std::string json;
  std::string bins;
  std::string histogram;
};

namespace {

thread_local std::string g_last_error;

template <typename F>
rfx_status guard(F&& body) {
  try {
    body();
    g_last_error.clear();
    return RFX_OK;
  } catch (const ConfigError& e) {
    g_last_error = e.what();
    return RFX_ERR_CONFIG;
  } catch (const ContractError& e) {
    // Preconditions at this boundary are caller-supplied parameters.
    g_last_error = e.what();
    return RFX_ERR_CONFIG;
  } catch (const NumericError& e) {
    g_last_error = e.what();
    return RFX_ERR_NUMERIC;
  } catch (const DataError& e) {
    g_last_error = e.what();
    return RFX_ERR_DATA;
  } catch (const FormatError& e) {
    g_last_error = e.what();
    return RFX_ERR_DATA;
  } catch (const DimensionError& e) {
    g_last_error = e.what();
    return RFX_ERR_DATA;
  } catch (const fs::filesystem_error& e) {
    g_last_error = e.what();
    return RFX_ERR_DATA;
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return RFX_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return RFX_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown failure";
    return RFX_ERR_INTERNAL;
  }
}

void require_arg(const void* p, const char* what) {
  if (p == nullptr) throw ContractError(std::string(what) + " is null");
}

const std::string& require_key(const config::RunConfig& c, const std::string& key) {
  const std::string& v = c.get(key);
  if (v.empty()) throw ConfigError("key '" + key + "' is required");
  return v;
}

fs::path out_dir(const config::RunConfig& c) {
  const fs::path dir = require_key(c, "out_dir");
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw DataError("cannot write " + path.string());
}

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

}  // namespace

extern "C" {

const char* rfx_version(void) { return "0.1.0"; }

const char* rfx_last_error(void) { return g_last_error.c_str(); }

rfx_status rfx_config_new(rfx_config** out) {
  return guard([&] {
    require_arg(out, "out");
    *out = new rfx_config;
  });
}

rfx_status rfx_config_load(rfx_config* config, const char* path) {
  return guard([&] {
    require_arg(config, "config");
    require_arg(path, "path");
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError(std::string("cannot read config file ") + path);
    std::stringstream ss;
    ss << in.rdbuf();
    config->cfg.merge_text(ss.str(), path);
  });
}

rfx_status rfx_config_set(rfx_config* config, const char* key, const char* value) {
  return guard([&] {
    require_arg(config, "config");
    require_arg(key, "key");
    require_arg(value, "value");
    config->cfg.set(key, value);
  });
}

rfx_status rfx_config_assign(rfx_config* config, const char* assignment) {
  return guard([&] {
    require_arg(config, "config");
    require_arg(assignment, "assignment");
    config->cfg.set_assignment(assignment);
  });
}

rfx_status rfx_config_apply_env(rfx_config* config) {
  return guard([&] {
    require_arg(config, "config");
    config->cfg.apply_environment();
  });
}

rfx_status rfx_config_get(const rfx_config* config, const char* key, const char** value) {
  return guard([&] {
    require_arg(config, "config");
    require_arg(key, "key");
    require_arg(value, "value");
    *value = config->cfg.get(key).c_str();
  });
}

const char* rfx_config_resolved(const rfx_config* config) {
  if (config == nullptr) return "";
  config->resolved = config->cfg.resolved();
  return config->resolved.c_str();
}

rfx_status rfx_config_write_resolved(const rfx_config* config, const char* path) {
  return guard([&] {
    require_arg(config, "config");
    require_arg(path, "path");
    config->cfg.write_resolved(path);
  });
}

int rfx_config_key_info(size_t index, const char** key, const char** default_value, const char** doc) {
  const auto& keys = config::known_keys();
  if (index >= keys.size()) return 0;
  if (key) *key = keys[index].key;
  if (default_value) *default_value = keys[index].default_value;
  if (doc) *doc = keys[index].doc;
  return 1;
}

void rfx_config_free(rfx_config* config) { delete config; }

rfx_status rfx_generate(const rfx_config* config, char* manifest_path, size_t capacity) {
  return guard([&] {
    require_arg(config, "config");
    const config::RunConfig& c = config->cfg;
    const data::Dataset ds = data::generate_synthetic(c.get("kind"), c.get_size("classes"), c.get_size("count"),
                                                      c.get_size("size"), c.get_u64("seed"), c.get_size("channels"));
    const fs::path dir = out_dir(c);
    c.write_resolved(dir / "config.resolved");
    const std::string path = data::save_dataset(ds, dir, require_key(c, "stem")).string();
    if (manifest_path != nullptr && capacity > 0) {
      if (path.size() >= capacity) throw ContractError("manifest path buffer too small");
      std::memcpy(manifest_path, path.c_str(), path.size() + 1);
    }
  });
}

rfx_status rfx_split(const rfx_config* config) {
  return guard([&] {
    require_arg(config, "config");
    const config::RunConfig& c = config->cfg;
    const data::Dataset ds = data::load_dataset(require_key(c, "dataset"));
    const std::string& kind = c.get("split");
    data::SplitResult split;
    if (kind == "balanced") {
      split = data::balanced_split(ds, c.get_size("per_class"), c.get_u64("seed"));
    } else if (kind == "long_tailed") {
      split = data::long_tailed_split(ds, c.get_size("n1"), c.get_double("imbalance"), c.get_double("labeled_fraction"),
                                      c.get_u64("seed"));
    } else {
      throw ConfigError("key 'split': expected balanced or long_tailed, got '" + kind + "'");
    }
    const fs::path dir = out_dir(c);
    c.write_resolved(dir / "config.resolved");
    data::save_dataset(split.labeled, dir, "labeled");
    data::save_dataset(split.unlabeled, dir, "unlabeled");
    nlohmann::json report;
    report["split"] = kind;
    report["classes"] = ds.classes;
    report["source_total"] = ds.size();
    report["labeled_total"] = split.labeled.size();
    report["unlabeled_total"] = split.unlabeled.size();
    report["labeled_per_class"] = split.labeled_per_class;
    report["unlabeled_per_class"] = split.unlabeled_per_class;
    write_text(dir / "split_report.json", report.dump(2) + "\n");
  });
}

rfx_status rfx_dataset_load(const char* manifest_path, rfx_dataset** out) {
  return guard([&] {
    require_arg(manifest_path, "manifest_path");
    require_arg(out, "out");
    auto* handle = new rfx_dataset{data::load_dataset(manifest_path)};
    *out = handle;
  });
}

size_t rfx_dataset_size(const rfx_dataset* dataset) { return dataset ? dataset->ds.size() : 0; }

size_t rfx_dataset_classes(const rfx_dataset* dataset) { return dataset ? dataset->ds.classes : 0; }

void rfx_dataset_free(rfx_dataset* dataset) { delete dataset; }

rfx_status rfx_augment_preview(const rfx_config* config) {
  return guard([&] {
    require_arg(config, "config");
    const config::RunConfig& c = config->cfg;
    const data::Dataset ds = data::load_dataset(require_key(c, "dataset"));
    const std::size_t n = std::min(c.get_size("preview_count"), ds.size());
    if (n == 0) throw ConfigError("key 'preview_count': nothing to preview");
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    augment::AugmentOptions opts;
    opts.n_ops = c.get_size("n_ops");
    opts.cutout = c.get_bool("cutout");
    opts.workers = c.get_size("workers");
    const std::uint64_t seed = c.get_u64("seed");
    const fs::path dir = out_dir(c);
    c.write_resolved(dir / "config.resolved");
    data::write_tensor_file(dir / "original.rfxt", ds.subset(idx).images);
    data::write_tensor_file(dir / "weak.rfxt", augment::augment_batch(ds.images, idx, augment::View::kWeak, opts, seed, 0, 0));
    data::write_tensor_file(dir / "strong.rfxt",
                            augment::augment_batch(ds.images, idx, augment::View::kStrong, opts, seed, 0, 0));
  });
}

rfx_status rfx_train(const rfx_config* config, rfx_row_callback callback, void* user, rfx_train_summary* summary) {
  return guard([&] {
    require_arg(config, "config");
    const config::RunConfig& c = config->cfg;
    const trainer::TrainConfig tc = config::train_config(c);
    const std::size_t checkpoint_interval = c.get_size("checkpoint_interval");
    const data::Dataset labeled = data::load_dataset(require_key(c, "labeled"));
    const data::Dataset unlabeled = data::load_dataset(require_key(c, "unlabeled"));
    const data::Dataset eval = data::load_dataset(require_key(c, "eval"));
    const models::ModelSpec spec = config::model_spec(c, labeled);

    const fs::path dir = out_dir(c);
    c.write_resolved(dir / "config.resolved");
    std::ofstream log(dir / "log.csv", std::ios::binary | std::ios::trunc);
    if (!log) throw DataError("cannot write " + (dir / "log.csv").string());
    log << trainer::log_header() << '\n';

    trainer::TrainHooks hooks;
    hooks.on_row = [&](const trainer::TrainLogRow& row) {
      const std::string line = trainer::format_row(row);
      log << line << '\n';
      log.flush();
      if (callback) callback(line.c_str(), user);
    };
    hooks.on_step = [&](std::size_t iteration, const models::ModelState<trainer::Real>& state) {
      if (checkpoint_interval > 0 && iteration % checkpoint_interval == 0 && iteration != tc.iterations) {
        trainer::save_checkpoint(dir / "checkpoints" / ("iter_" + std::to_string(iteration)), state, iteration);
      }
    };
    const trainer::TrainResult result = trainer::train(tc, spec, labeled, unlabeled, eval, hooks);
    trainer::save_checkpoint(dir / "checkpoints" / "final", result.state, tc.iterations);
    const metrics::MetricReport& final_report = result.final_report;

    nlohmann::json j;
    j["iterations"] = tc.iterations;
    j["ablation"] = objective::ablation_name(tc.objective.mode);
    j["seed"] = tc.seed;
    j["best_error"] = optional_json(result.history.best());
    j["median_error"] = optional_json(result.history.median_last(tc.median_window));
    j["median_window"] = tc.median_window;
    j["final_error"] = final_report.top1_error;
    j["final_top5_error"] = final_report.top5_error;
    j["final_ece"] = final_report.calibration.ece;
    j["evaluations"] = result.history.top1.size();
    write_text(dir / "summary.json", j.dump(2) + "\n");

    if (summary != nullptr) {
      summary->iterations = tc.iterations;
      summary->best_error = *result.history.best();
      summary->median_error = *result.history.median_last(tc.median_window);
      summary->final_error = final_report.top1_error;
      summary->final_ece = final_report.calibration.ece;
    }
  });
}

rfx_status rfx_checkpoint_load(const char* path, rfx_checkpoint** out) {
  return guard([&] {
    require_arg(path, "path");
    require_arg(out, "out");
    *out = new rfx_checkpoint{trainer::load_checkpoint(path)};
  });
}

size_t rfx_checkpoint_iteration(const rfx_checkpoint* checkpoint) { return checkpoint ? checkpoint->ck.iteration : 0; }

void rfx_checkpoint_free(rfx_checkpoint* checkpoint) { delete checkpoint; }

rfx_status rfx_evaluate(const rfx_checkpoint* checkpoint, const rfx_dataset* dataset, size_t bins, rfx_report** out) {
  return guard([&] {
    require_arg(checkpoint, "checkpoint");
    require_arg(dataset, "dataset");
    require_arg(out, "out");
    if (bins < 1) throw ConfigError("calibration needs at least one bin");
    auto report = std::make_unique<rfx_report>();
    report->report = trainer::evaluate(checkpoint->ck.state.spec, checkpoint->ck.state.ema, dataset->ds, bins);
    report->json = metrics::to_json(report->report) + "\n";
    report->bins = metrics::bins_csv(report->report.calibration);
    report->histogram = metrics::histogram_csv(report->report.calibration);
    *out = report.release();
  });
}

double rfx_report_top1_error(const rfx_report* report) { return report ? report->report.top1_error : 0.0; }

double rfx_report_ece(const rfx_report* report) { return report ? report->report.calibration.ece : 0.0; }

const char* rfx_report_json(const rfx_report* report) { return report ? report->json.c_str() : ""; }

const char* rfx_report_bins_csv(const rfx_report* report) { return report ? report->bins.c_str() : ""; }

const char* rfx_report_histogram_csv(const rfx_report* report) { return report ? report->histogram.c_str() : ""; }

void rfx_report_free(rfx_report* report) { delete report; }

}  // extern "C"
