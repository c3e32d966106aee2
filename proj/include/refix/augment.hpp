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
#include <string_view>
#include <vector>

#include "refix/rng.hpp"
#include "refix/tensor.hpp"

namespace refix::augment {

// Planar float image, pixel values in [0, 1].
struct Image {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t c, std::size_t h, std::size_t w, float fill = 0.0f)
      : channels(c), height(h), width(w), pixels(c * h * w, fill) {}

  float& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }

  // Throws ContractError unless dimensions are positive and pixels lie in [0, 1].
  void validate() const;

  friend bool operator==(const Image&, const Image&) = default;
};

// Image n of a [N,C,H,W] batch, and the reverse.
Image image_from_batch(const Tensor<float>& batch, std::size_t n);
void store_in_batch(const Image& img, Tensor<float>& batch, std::size_t n);

enum class TransformKind {
  kAutocontrast,
  kBrightness,
  kColor,
  kContrast,
  kEqualize,
  kIdentity,
  kPosterize,
  kRotate,
  kSharpness,
  kShearX,
  kShearY,
  kSolarize,
  kTranslateX,
  kTranslateY,
};

// One row of the RandAugment transform table. [lo, hi] is the sampling range;
// [domain_lo, domain_hi] is what apply_transform accepts.
struct TransformInfo {
  TransformKind kind;
  std::string_view name;
  bool has_param;
  bool integer;
  double lo;
  double hi;
  double domain_lo;
  double domain_hi;
};

std::span<const TransformInfo> transform_table();
// Throws ContractError for unknown names.
const TransformInfo& transform_info(std::string_view name);

struct TransformSpec {
  std::string name;
  double value = 0.0;

  friend bool operator==(const TransformSpec&, const TransformSpec&) = default;
};

// Applies one table transform; output is clamped to [0, 1] and keeps the
// input shape. Throws ContractError for unknown names or values outside the
// transform's domain.
Image apply_transform(const Image& img, const TransformSpec& spec);

// Random flip and pad-and-crop. pad is ceil(extent / 8) per axis, reflect
// padding; an offset equal to pad is the centered (identity) crop.
struct WeakParams {
  bool flip = false;
  std::size_t offset_y = 0;
  std::size_t offset_x = 0;
};

WeakParams sample_weak(Rng& rng, std::size_t height, std::size_t width);
Image apply_weak(const Image& img, const WeakParams& params);
Image weak_augment(const Image& img, Rng& rng);

std::size_t weak_pad(std::size_t extent);

struct CutoutBox {
  std::size_t y = 0;
  std::size_t x = 0;
  std::size_t side = 0;
};

struct StrongPlan {
  std::vector<TransformSpec> ops;
  std::optional<CutoutBox> cutout;
};

// n_ops transforms drawn uniformly (with replacement) from the table, each
// with a uniform parameter in its range, then optionally one gray square of
// side floor(min(H, W) / 2) placed fully inside the image.
StrongPlan sample_strong(Rng& rng, std::size_t n_ops, bool cutout, std::size_t height, std::size_t width);
Image apply_strong(const Image& img, const StrongPlan& plan);
Image strong_augment(const Image& img, Rng& rng, std::size_t n_ops = 2, bool cutout = true);

enum class View : std::uint8_t { kWeak = 0, kStrong = 1 };

struct AugmentOptions {
  std::size_t n_ops = 2;
  bool cutout = true;
  std::size_t workers = 1;
};

// Stream for one sample: a pure function of its coordinates.
Rng sample_stream(std::uint64_t seed, std::uint64_t iteration, std::uint64_t stream, std::uint64_t index,
                  View view);

// Augments images[indices[i]] into row i of the result. Row i draws from
// sample_stream(seed, iteration, stream, i, view), so the output is identical
// for every worker count.
Tensor<float> augment_batch(const Tensor<float>& images, std::span<const std::size_t> indices, View view,
                            const AugmentOptions& options, std::uint64_t seed, std::uint64_t iteration,
                            std::uint64_t stream);

}  // namespace refix::augment
