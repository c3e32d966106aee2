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

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>

#include "refix/config.hpp"

using refix::ConfigError;
namespace cfg = refix::config;
namespace fs = std::filesystem;

namespace {

struct EnvSeed {
  explicit EnvSeed(const char* value) { ::setenv("RFX_SEED", value, 1); }
  ~EnvSeed() { ::unsetenv("RFX_SEED"); }
};

}  // namespace

TEST_CASE("defaults cover every documented key") {
  const cfg::RunConfig c;
  std::set<std::string> names;
  for (const auto& k : cfg::known_keys()) {
    CHECK(names.insert(k.key).second);
    CHECK(std::string(k.doc).size() > 0);
    CHECK(c.get(k.key) == k.default_value);
  }
  CHECK(c.values().size() == names.size());
  const auto t = cfg::train_config(c);
  CHECK(t.objective.tau == 0.95);
  CHECK(t.objective.temperature == 0.5);
  CHECK(t.objective.lambda_u == 1.0);
  CHECK(t.mu == 7);
  CHECK(t.batch == 64);
  CHECK(t.lr == 0.03);
  CHECK(t.momentum == 0.9);
  CHECK(t.ema_momentum == 0.999);
  CHECK(t.weight_decay == 5e-4);
  CHECK(t.iterations == 20000);
  CHECK(t.objective.mode == refix::objective::AblationMode::kBoth);
}

TEST_CASE("parsing") {
  cfg::RunConfig c;
  c.merge_text("# comment\n\n  tau = 0.9 \nablation=hard_only\r\nwidths = 8, 4\n", "text");
  CHECK(c.get_double("tau") == 0.9);
  CHECK(c.get("ablation") == "hard_only");
  CHECK(c.get_sizes("widths") == std::vector<std::size_t>{8, 4});

  CHECK_THROWS_AS(c.merge_text("bogus = 1\n", "t"), ConfigError);
  CHECK_THROWS_AS(c.merge_text("tau = 0.5\ntau = 0.6\n", "t"), ConfigError);
  CHECK_THROWS_AS(c.merge_text("no equals sign\n", "t"), ConfigError);
  CHECK_THROWS_AS(c.set("Tau", "1"), ConfigError);
  try {
    c.merge_text("\nmystery = 3\n", "file.cfg");
    FAIL("unknown key accepted");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("file.cfg:2") != std::string::npos);
    CHECK(std::string(e.what()).find("mystery") != std::string::npos);
  }
}

TEST_CASE("typed values are validated") {
  cfg::RunConfig c;
  c.set("batch", "-3");
  CHECK_THROWS_AS(c.get_size("batch"), ConfigError);
  c.set("batch", "0");
  CHECK_THROWS_AS(cfg::train_config(c), ConfigError);
  c = cfg::RunConfig{};
  c.set("lr", "fast");
  CHECK_THROWS_AS(cfg::train_config(c), ConfigError);
  c = cfg::RunConfig{};
  c.set("lr", "nan");
  CHECK_THROWS_AS(cfg::train_config(c), ConfigError);
  c = cfg::RunConfig{};
  c.set("cutout", "maybe");
  CHECK_THROWS_AS(cfg::train_config(c), ConfigError);
  c = cfg::RunConfig{};
  c.set("threshold", "adaptive");
  CHECK_THROWS_AS(cfg::train_config(c), ConfigError);
  c = cfg::RunConfig{};
  c.set("ablation", "neither");
  CHECK_THROWS_AS(cfg::train_config(c), ConfigError);
}

TEST_CASE("overrides and RFX_SEED precedence") {
  cfg::RunConfig c;
  c.merge_text("seed = 5\n", "t");
  c.set_assignment("seed=6");
  CHECK(c.get_u64("seed") == 6);
  CHECK_THROWS_AS(c.set_assignment("seed"), ConfigError);
  {
    EnvSeed env("42");
    c.apply_environment();
  }
  CHECK(c.get_u64("seed") == 42);
  {
    EnvSeed env("x1");
    CHECK_THROWS_AS(c.apply_environment(), ConfigError);
  }
}

TEST_CASE("resolved text parses back to an equal config") {
  cfg::RunConfig c;
  c.set("arch", "mlp");
  c.set("widths", "32");
  c.set("lambda_u", "0.25");
  const fs::path path = fs::temp_directory_path() / "refix_config_test" / "config.resolved";
  c.write_resolved(path);
  const cfg::RunConfig back = cfg::RunConfig::from_file(path);
  CHECK(back == c);
  CHECK(back.resolved() == c.resolved());
  fs::remove_all(path.parent_path());
  CHECK_THROWS_AS(cfg::RunConfig::from_file(path), refix::DataError);
}

TEST_CASE("model spec takes extents from the dataset") {
  refix::data::Dataset ds = refix::data::generate_synthetic("shapes", 3, 12, 8, 1);
  cfg::RunConfig c;
  const auto spec = cfg::model_spec(c, ds);
  CHECK(spec.classes == 3);
  CHECK(spec.height == 8);
  CHECK(spec.widths == std::vector<std::size_t>{16, 32});
  c.set("widths", "16");
  CHECK_THROWS_AS(cfg::model_spec(c, ds), ConfigError);
  c.set("arch", "transformer");
  CHECK_THROWS_AS(cfg::model_spec(c, ds), ConfigError);
}
