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
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "refix/data.hpp"
#include "refix/model.hpp"
#include "refix/trainer.hpp"

namespace refix::config {

struct KeyInfo {
  const char* key;
  const char* default_value;
  const char* doc;
};

// Every recognized key with its default, in documentation order.
const std::vector<KeyInfo>& known_keys();

// Flat key=value run configuration. Values are kept as text; the typed views
// below parse and validate them. Precedence, lowest first: defaults, config
// file, set() overrides, RFX_SEED.
class RunConfig {
 public:
  RunConfig();

  // Lines are `key = value`; blank lines and lines starting with '#' are
  // ignored. Throws ConfigError for unknown or repeated keys and malformed
  // lines, DataError when the file cannot be read.
  static RunConfig from_file(const std::filesystem::path& path);
  void merge_text(const std::string& text, const std::string& origin);

  // Throws ConfigError for unknown keys.
  void set(const std::string& key, const std::string& value);
  // Accepts "key=value".
  void set_assignment(const std::string& assignment);
  // Applies RFX_SEED when the variable is set and nonempty.
  void apply_environment();

  const std::string& get(const std::string& key) const;
  std::string get_string(const std::string& key) const { return get(key); }
  std::uint64_t get_u64(const std::string& key) const;
  std::size_t get_size(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<std::size_t> get_sizes(const std::string& key) const;
  std::vector<double> get_doubles(const std::string& key) const;

  // Sorted key = value lines; parsing the text back yields an equal config.
  std::string resolved() const;
  void write_resolved(const std::filesystem::path& path) const;

  const std::map<std::string, std::string>& values() const { return values_; }
  friend bool operator==(const RunConfig&, const RunConfig&) = default;

 private:
  std::map<std::string, std::string> values_;
};

// Typed views. Each throws ConfigError naming the offending key.
trainer::TrainConfig train_config(const RunConfig& config);
// Input extents and class count come from the dataset.
models::ModelSpec model_spec(const RunConfig& config, const data::Dataset& reference);

}  // namespace refix::config
