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
#include <span>
#include <string>
#include <vector>

#include "refix/tensor.hpp"

namespace refix::metrics {
struct PseudoLabelAccess;
}

namespace refix::data {

// ---------------------------------------------------------------------------
// Binary tensor file
//
//   offset 0   magic "RFXT"
//   offset 4   version 0x01
//   offset 5   dtype (0 = unsigned 8-bit, 1 = float 32-bit)
//   offset 6   ndim
//   offset 7   ndim little-endian uint32 extents
//   then       row-major little-endian payload

enum class DType : std::uint8_t { kU8 = 0, kF32 = 1 };

struct TensorFile {
  DType dtype = DType::kF32;
  Shape shape;
  std::vector<std::uint8_t> u8;  // filled when dtype == kU8
  std::vector<float> f32;        // filled when dtype == kF32

  // Values as float regardless of the stored dtype.
  Tensor<float> as_float() const;
};

std::vector<std::uint8_t> encode_tensor(const Tensor<float>& t);
std::vector<std::uint8_t> encode_tensor_u8(const Shape& shape, std::span<const std::uint8_t> values);
// Throws FormatError naming the byte offset of the first problem.
TensorFile decode_tensor(std::span<const std::uint8_t> bytes);

void write_tensor_file(const std::filesystem::path& path, const Tensor<float>& t);
void write_tensor_file_u8(const std::filesystem::path& path, const Shape& shape,
                          std::span<const std::uint8_t> values);
TensorFile read_tensor_file(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Plain-text manifests: one key=value per line, '#' starts a comment.

using Manifest = std::map<std::string, std::string>;

Manifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);

// ---------------------------------------------------------------------------
// Datasets

class HiddenTruth;
struct Dataset;

// Passkey granting read access to the ground truth of unlabeled samples.
class TruthKey {
  TruthKey() = default;
  friend struct metrics::PseudoLabelAccess;
  friend struct DatasetIo;
  friend struct Dataset;
};

// Ground-truth labels of an unlabeled split. Kept for pseudo-label accuracy
// diagnostics only; nothing outside the metrics module can read them.
class HiddenTruth {
 public:
  HiddenTruth() = default;
  explicit HiddenTruth(std::vector<std::size_t> labels) : labels_(std::move(labels)) {}

  bool available() const { return !labels_.empty(); }
  std::size_t size() const { return labels_.size(); }
  const std::vector<std::size_t>& reveal(TruthKey) const { return labels_; }

  friend bool operator==(const HiddenTruth&, const HiddenTruth&) = default;

 private:
  std::vector<std::size_t> labels_;
};

struct Dataset {
  Tensor<float> images;             // [N,C,H,W], values in [0, 1]
  std::vector<std::size_t> labels;  // empty for unlabeled data
  std::size_t classes = 0;
  HiddenTruth truth;                // unlabeled ground truth, metrics only

  std::size_t size() const { return images.rank() == 4 ? images.dim(0) : 0; }
  std::size_t channels() const { return images.dim(1); }
  std::size_t height() const { return images.dim(2); }
  std::size_t width() const { return images.dim(3); }
  bool labeled() const { return !labels.empty(); }

  // Throws DataError when fields disagree or labels fall outside [0, K).
  void validate() const;

  // Rows `indices` of this dataset (labels and truth follow).
  Dataset subset(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> class_counts() const;
};

struct DatasetIo {
  // Writes <stem>.images.rfxt, <stem>.labels.rfxt / <stem>.truth.rfxt and
  // <stem>.manifest into dir; returns the manifest path.
  static std::filesystem::path save(const Dataset& ds, const std::filesystem::path& dir, const std::string& stem);
  // Throws DataError naming the path when a referenced file is missing.
  static Dataset load(const std::filesystem::path& manifest_path);
};

inline std::filesystem::path save_dataset(const Dataset& ds, const std::filesystem::path& dir,
                                          const std::string& stem) {
  return DatasetIo::save(ds, dir, stem);
}
inline Dataset load_dataset(const std::filesystem::path& manifest_path) { return DatasetIo::load(manifest_path); }

// ---------------------------------------------------------------------------
// Splits

struct SplitResult {
  Dataset labeled;
  Dataset unlabeled;  // labels moved into the hidden truth
  std::vector<std::size_t> labeled_per_class;
  std::vector<std::size_t> unlabeled_per_class;
};

// Exactly per_class labeled samples of every class, uniformly chosen; the
// remainder becomes unlabeled. Throws DataError on class underflow.
SplitResult balanced_split(const Dataset& ds, std::size_t per_class, std::uint64_t seed);

// N_k = round(N1 * lambda^(-(k-1)/(L-1))), at least 1, k = 1..L.
std::vector<std::size_t> long_tailed_counts(std::size_t n1, double imbalance, std::size_t classes);

// Keeps N_k samples of class k, of which round(beta * N_k) are labeled and
// the rest unlabeled. Throws DataError when a class has fewer than N_k samples.
SplitResult long_tailed_split(const Dataset& ds, std::size_t n1, double imbalance, double labeled_fraction,
                              std::uint64_t seed);

// ---------------------------------------------------------------------------
// Synthetic desk-scale datasets

// Number of glyph families available to the "shapes" generator.
std::size_t shape_family_count();

// kind "shapes": K glyph classes with position/scale jitter and Gaussian pixel
// noise (sigma 0.05); kind "moons-img": two classes of rendered two-moons point
// clouds. Labels are exactly balanced (up to N mod K) in shuffled order.
Dataset generate_synthetic(const std::string& kind, std::size_t classes, std::size_t count, std::size_t size,
                           std::uint64_t seed, std::size_t channels = 1);

}  // namespace refix::data
