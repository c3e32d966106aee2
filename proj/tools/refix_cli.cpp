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

// refix command-line front end. Talks to the engine through the C interface only.
#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "refix/refix.h"

namespace fs = std::filesystem;

namespace {

struct Failure {
  rfx_status status;
};

void check(rfx_status status) {
  if (status != RFX_OK) throw Failure{status};
}

// RAII owner of a C handle.
template <typename T, void (*Free)(T*)>
struct Handle {
  T* ptr = nullptr;
  Handle() = default;
  Handle(const Handle&) = delete;
  Handle& operator=(const Handle&) = delete;
  ~Handle() { Free(ptr); }
};

using Config = Handle<rfx_config, rfx_config_free>;
using Dataset = Handle<rfx_dataset, rfx_dataset_free>;
using Checkpoint = Handle<rfx_checkpoint, rfx_checkpoint_free>;
using Report = Handle<rfx_report, rfx_report_free>;

// Options shared by every command plus per-command flags mapped onto keys.
struct Command {
  Command(CLI::App& root, const std::string& name, const std::string& help) : app(root.add_subcommand(name, help)) {
    app->add_option("-c,--config", config_path, "key = value config file");
    app->add_option("--set", overrides, "override, key=value (repeatable)");
  }
  Command(const Command&) = delete;
  Command& operator=(const Command&) = delete;

  CLI::App* app;
  std::string config_path;
  std::vector<std::string> overrides;
  std::map<std::string, std::string> values;  // key -> flag value
  std::vector<std::pair<std::string, CLI::Option*>> flags;

  void flag(const std::string& name, const std::string& key, const std::string& help) {
    flags.emplace_back(key, app->add_option(name, values[key], help));
  }
};

void add_out(Command& cmd) { cmd.flag("-o,--out", "out_dir", "output directory"); }

// defaults < config file < flags < --set < RFX_SEED
void build_config(const Command& cmd, Config& config) {
  check(rfx_config_new(&config.ptr));
  if (!cmd.config_path.empty()) check(rfx_config_load(config.ptr, cmd.config_path.c_str()));
  for (const auto& [key, opt] : cmd.flags) {
    if (opt->count() > 0) check(rfx_config_set(config.ptr, key.c_str(), cmd.values.at(key).c_str()));
  }
  for (const std::string& o : cmd.overrides) check(rfx_config_assign(config.ptr, o.c_str()));
  check(rfx_config_apply_env(config.ptr));
}

const char* get(const Config& config, const char* key) {
  const char* v = nullptr;
  check(rfx_config_get(config.ptr, key, &v));
  return v;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) {
    std::fprintf(stderr, "error: cannot write %s\n", path.string().c_str());
    throw Failure{RFX_ERR_DATA};
  }
}

void print_row(const char* row, void* verbose) {
  if (*static_cast<bool*>(verbose)) std::fprintf(stderr, "%s\n", row);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App root{"refix: semi-supervised training with hard and soft pseudo-labels"};
  root.require_subcommand(1);
  root.set_version_flag("--version", std::string(rfx_version()));

  Command gen(root, "gen-data", "generate a synthetic dataset");
  add_out(gen);
  gen.flag("--kind", "kind", "shapes or moons-img");
  gen.flag("-k,--classes", "classes", "number of classes");
  gen.flag("-n,--count", "count", "number of samples");
  gen.flag("--size", "size", "image height and width");
  gen.flag("--channels", "channels", "image channels");
  gen.flag("--seed", "seed", "generator seed");
  gen.flag("--stem", "stem", "file stem");

  Command split(root, "split", "split a dataset into labeled and unlabeled parts");
  add_out(split);
  split.flag("-d,--dataset", "dataset", "dataset manifest");
  split.flag("--split", "split", "balanced or long_tailed");
  split.flag("--per-class", "per_class", "labeled samples per class (balanced)");
  split.flag("--n1", "n1", "head class size (long_tailed)");
  split.flag("--imbalance", "imbalance", "imbalance ratio (long_tailed)");
  split.flag("--labeled-fraction", "labeled_fraction", "labeled fraction per class (long_tailed)");
  split.flag("--seed", "seed", "split seed");

  Command train(root, "train", "train a model");
  add_out(train);
  train.flag("--labeled", "labeled", "labeled manifest");
  train.flag("--unlabeled", "unlabeled", "unlabeled manifest");
  train.flag("--eval", "eval", "evaluation manifest");
  train.flag("--iterations", "iterations", "optimizer steps");
  train.flag("--ablation", "ablation", "hard_only, soft_only or both");
  train.flag("--workers", "workers", "augmentation threads");
  train.flag("--seed", "seed", "training seed");
  bool verbose = false;
  train.app->add_flag("-v,--verbose", verbose, "echo log rows to standard error");

  Command eval(root, "eval", "evaluate a checkpoint");
  add_out(eval);
  eval.flag("--checkpoint", "checkpoint", "checkpoint manifest or directory");
  eval.flag("-d,--dataset", "dataset", "dataset manifest");
  eval.flag("--bins", "bins", "calibration bins");

  Command calib(root, "calibrate", "calibration report of a checkpoint");
  add_out(calib);
  calib.flag("--checkpoint", "checkpoint", "checkpoint manifest or directory");
  calib.flag("-d,--dataset", "dataset", "dataset manifest");
  calib.flag("--bins", "bins", "calibration bins");

  Command preview(root, "augment-preview", "write weak and strong views of a few images");
  add_out(preview);
  preview.flag("-d,--dataset", "dataset", "dataset manifest");
  preview.flag("--count", "preview_count", "number of images");
  preview.flag("--seed", "seed", "augmentation seed");

  CLI::App* keys = root.add_subcommand("keys", "list every config key with its default");

  try {
    root.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = root.exit(e);
    return code == 0 ? 0 : RFX_ERR_CONFIG;
  }

  try {
    if (keys->parsed()) {
      const char *key, *def, *doc;
      for (size_t i = 0; rfx_config_key_info(i, &key, &def, &doc); ++i) std::printf("%s = %s\t# %s\n", key, def, doc);
      return 0;
    }
    Command* active = nullptr;
    for (Command* c : {&gen, &split, &train, &eval, &calib, &preview}) {
      if (c->app->parsed()) active = c;
    }
    Config config;
    build_config(*active, config);

    if (active == &gen) {
      char manifest[4096];
      check(rfx_generate(config.ptr, manifest, sizeof manifest));
      std::fprintf(stderr, "wrote %s\n", manifest);
    } else if (active == &split) {
      check(rfx_split(config.ptr));
      std::fprintf(stderr, "wrote %s/split_report.json\n", get(config, "out_dir"));
    } else if (active == &train) {
      rfx_train_summary s{};
      check(rfx_train(config.ptr, print_row, &verbose, &s));
      std::fprintf(stderr, "done: %zu iterations, best %.2f%%, median %.2f%%, final %.2f%%, ECE %.2f\n", s.iterations,
                   s.best_error, s.median_error, s.final_error, s.final_ece);
    } else if (active == &eval || active == &calib) {
      Checkpoint ck;
      Dataset ds;
      Report report;
      const char* checkpoint = get(config, "checkpoint");
      const char* dataset = get(config, "dataset");
      if (*checkpoint == '\0' || *dataset == '\0') {
        std::fprintf(stderr, "error: keys 'checkpoint' and 'dataset' are required\n");
        return RFX_ERR_CONFIG;
      }
      const char* bins_text = get(config, "bins");
      char* end = nullptr;
      const unsigned long bins = std::strtoul(bins_text, &end, 10);
      if (*bins_text == '\0' || *end != '\0' || bins == 0) {
        std::fprintf(stderr, "error: key 'bins': expected a positive integer, got '%s'\n", bins_text);
        return RFX_ERR_CONFIG;
      }
      check(rfx_checkpoint_load(checkpoint, &ck.ptr));
      check(rfx_dataset_load(dataset, &ds.ptr));
      check(rfx_evaluate(ck.ptr, ds.ptr, bins, &report.ptr));
      const fs::path out = get(config, "out_dir");
      std::error_code ec;
      fs::create_directories(out, ec);
      check(rfx_config_write_resolved(config.ptr, (out / "config.resolved").string().c_str()));
      if (active == &eval) {
        write_file(out / "metrics.json", rfx_report_json(report.ptr));
        write_file(out / "bins.csv", rfx_report_bins_csv(report.ptr));
      } else {
        write_file(out / "calibration.json", rfx_report_json(report.ptr));
        write_file(out / "reliability.csv", rfx_report_bins_csv(report.ptr));
        write_file(out / "confidence_histogram.csv", rfx_report_histogram_csv(report.ptr));
      }
      std::fprintf(stderr, "top-1 error %.17g%%, ECE %.17g\n", rfx_report_top1_error(report.ptr),
                   rfx_report_ece(report.ptr));
    } else if (active == &preview) {
      check(rfx_augment_preview(config.ptr));
      std::fprintf(stderr, "wrote %s/{original,weak,strong}.rfxt\n", get(config, "out_dir"));
    }
  } catch (const Failure& f) {
    std::fprintf(stderr, "error: %s\n", rfx_last_error());
    return f.status;
  }
  return 0;
}
