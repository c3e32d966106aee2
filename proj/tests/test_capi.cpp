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

#include <doctest.h>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <thread>

#include "refix/refix.h"

namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Scratch {
  fs::path dir;
  explicit Scratch(const std::string& name) : dir(fs::temp_directory_path() / ("refix_capi_" + name)) {
    fs::remove_all(dir);
  }
  ~Scratch() { fs::remove_all(dir); }
  std::string operator/(const std::string& rel) const { return (dir / rel).string(); }
};

rfx_config* config_with(std::initializer_list<const char*> assignments) {
  rfx_config* c = nullptr;
  REQUIRE(rfx_config_new(&c) == RFX_OK);
  for (const char* a : assignments) REQUIRE(rfx_config_assign(c, a) == RFX_OK);
  return c;
}

}  // namespace

TEST_CASE("status codes and the last error") {
  rfx_config* c = config_with({});
  CHECK(rfx_config_set(c, "no_such_key", "1") == RFX_ERR_CONFIG);
  CHECK(std::string(rfx_last_error()).find("no_such_key") != std::string::npos);
  CHECK(rfx_config_set(c, "tau", "0.5") == RFX_OK);
  CHECK(std::string(rfx_last_error()).empty());
  CHECK(rfx_config_load(c, "/nonexistent/run.cfg") == RFX_ERR_DATA);
  CHECK(rfx_config_set(nullptr, "tau", "1") == RFX_ERR_CONFIG);

  rfx_dataset* ds = nullptr;
  CHECK(rfx_dataset_load("/nonexistent/x.manifest", &ds) == RFX_ERR_DATA);
  CHECK(ds == nullptr);
  CHECK(std::string(rfx_last_error()).find("/nonexistent/x.manifest") != std::string::npos);

  // The message is per thread.
  std::string other;
  std::thread t([&] { other = rfx_last_error(); });
  t.join();
  CHECK(other.empty());
  rfx_config_free(c);
}

TEST_CASE("key documentation is enumerable") {
  std::size_t n = 0;
  const char *key, *def, *doc;
  while (rfx_config_key_info(n, &key, &def, &doc)) ++n;
  CHECK(n > 30);
  rfx_config* c = config_with({});
  const std::string resolved = rfx_config_resolved(c);
  CHECK(static_cast<std::size_t>(std::count(resolved.begin(), resolved.end(), '\n')) == n);
  rfx_config_free(c);
}

TEST_CASE("generate, split, train, evaluate") {
  Scratch s("pipeline");
  const std::string data_dir = "out_dir=" + s / "data";
  rfx_config* gen = config_with({data_dir.c_str(), "classes=4", "count=80", "size=8", "seed=2"});
  char manifest[1024];
  REQUIRE(rfx_generate(gen, manifest, sizeof manifest) == RFX_OK);
  CHECK(fs::exists(s / "data/config.resolved"));
  rfx_dataset* ds = nullptr;
  REQUIRE(rfx_dataset_load(manifest, &ds) == RFX_OK);
  CHECK(rfx_dataset_size(ds) == 80);
  CHECK(rfx_dataset_classes(ds) == 4);

  const std::string dataset = std::string("dataset=") + manifest;
  const std::string split_dir = "out_dir=" + s / "split";
  rfx_config* split = config_with({dataset.c_str(), split_dir.c_str(), "per_class=3"});
  REQUIRE(rfx_split(split) == RFX_OK);
  const std::string report = slurp(s / "split/split_report.json");
  CHECK(report.find("\"labeled_total\": 12") != std::string::npos);
  CHECK(report.find("\"unlabeled_total\": 68") != std::string::npos);

  const std::string labeled = "labeled=" + s / "split/labeled.manifest";
  const std::string unlabeled = "unlabeled=" + s / "split/unlabeled.manifest";
  const std::string eval = std::string("eval=") + manifest;
  const std::string run_dir = "out_dir=" + s / "run";
  rfx_config* train = config_with({labeled.c_str(), unlabeled.c_str(), eval.c_str(), run_dir.c_str(), "arch=mlp",
                                   "widths=8", "batch=4", "mu=2", "iterations=6", "log_interval=3",
                                   "eval_interval=3", "checkpoint_interval=2"});
  std::size_t rows = 0;
  rfx_train_summary summary{};
  REQUIRE(rfx_train(
              train, [](const char*, void* n) { ++*static_cast<std::size_t*>(n); }, &rows, &summary) == RFX_OK);
  CHECK(rows == 2);
  CHECK(summary.iterations == 6);
  CHECK(summary.best_error <= summary.final_error);
  CHECK(fs::exists(s / "run/checkpoints/iter_2/checkpoint.manifest"));
  CHECK(fs::exists(s / "run/checkpoints/iter_4/checkpoint.manifest"));
  CHECK(fs::exists(s / "run/checkpoints/final/checkpoint.manifest"));
  CHECK(slurp(s / "run/config.resolved") == rfx_config_resolved(train));

  rfx_checkpoint* ck = nullptr;
  REQUIRE(rfx_checkpoint_load((s / "run/checkpoints/final").c_str(), &ck) == RFX_OK);
  CHECK(rfx_checkpoint_iteration(ck) == 6);
  rfx_report* rep = nullptr;
  REQUIRE(rfx_evaluate(ck, ds, 10, &rep) == RFX_OK);
  CHECK(rfx_report_top1_error(rep) == summary.final_error);
  CHECK(rfx_report_ece(rep) == summary.final_ece);
  CHECK(std::string(rfx_report_json(rep)).find("top1_error") != std::string::npos);
  CHECK(std::string(rfx_report_bins_csv(rep)).rfind("bin,lower,upper,count,mean_confidence,accuracy,weight", 0) == 0);
  CHECK(std::string(rfx_report_histogram_csv(rep)).rfind("bin,lower,upper,count,fraction", 0) == 0);
  rfx_report_free(rep);

  // A dataset of another shape is a data error.
  rfx_config* other = config_with({("out_dir=" + s / "other").c_str(), "classes=4", "count=8", "size=12"});
  REQUIRE(rfx_generate(other, manifest, sizeof manifest) == RFX_OK);
  rfx_dataset* wrong = nullptr;
  REQUIRE(rfx_dataset_load(manifest, &wrong) == RFX_OK);
  rep = nullptr;
  CHECK(rfx_evaluate(ck, wrong, 10, &rep) == RFX_ERR_DATA);
  CHECK(rep == nullptr);

  // Divergence maps onto the numeric status.
  rfx_config_assign(train, "lr=1e36");
  rfx_config_assign(train, ("out_dir=" + s / "diverged").c_str());
  CHECK(rfx_train(train, nullptr, nullptr, nullptr) == RFX_ERR_NUMERIC);
  CHECK(std::string(rfx_last_error()).find("last good iteration") != std::string::npos);

  for (rfx_config* c : {gen, split, train, other}) rfx_config_free(c);
  rfx_dataset_free(ds);
  rfx_dataset_free(wrong);
  rfx_checkpoint_free(ck);
}

TEST_CASE("training requires its dataset keys") {
  rfx_config* c = config_with({});
  CHECK(rfx_train(c, nullptr, nullptr, nullptr) == RFX_ERR_CONFIG);
  CHECK(std::string(rfx_last_error()).find("labeled") != std::string::npos);
  rfx_config_free(c);
}
