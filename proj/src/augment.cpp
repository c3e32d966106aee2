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

#include "refix/augment.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <thread>

namespace refix::augment {

namespace {

constexpr std::array<TransformInfo, 14> kTable{{
    {TransformKind::kAutocontrast, "Autocontrast", false, false, 0, 0, 0, 0},
    {TransformKind::kBrightness, "Brightness", true, false, 0.05, 0.95, 0.0, 2.0},
    {TransformKind::kColor, "Color", true, false, 0.05, 0.95, 0.0, 2.0},
    {TransformKind::kContrast, "Contrast", true, false, 0.05, 0.95, 0.0, 2.0},
    {TransformKind::kEqualize, "Equalize", false, false, 0, 0, 0, 0},
    {TransformKind::kIdentity, "Identity", false, false, 0, 0, 0, 0},
    {TransformKind::kPosterize, "Posterize", true, true, 4, 8, 1, 8},
    {TransformKind::kRotate, "Rotate", true, false, -30, 30, -180, 180},
    {TransformKind::kSharpness, "Sharpness", true, false, 0.05, 0.95, 0.0, 2.0},
    {TransformKind::kShearX, "Shear_x", true, false, -0.3, 0.3, -1, 1},
    {TransformKind::kShearY, "Shear_y", true, false, -0.3, 0.3, -1, 1},
    {TransformKind::kSolarize, "Solarize", true, false, 0, 1, 0, 1},
    {TransformKind::kTranslateX, "Translate_x", true, false, -0.3, 0.3, -1, 1},
    {TransformKind::kTranslateY, "Translate_y", true, false, -0.3, 0.3, -1, 1},
}};

float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

int quantize(float p) { return std::clamp(static_cast<int>(std::lround(p * 255.0f)), 0, 255); }

// Bilinear read with edge replication.
double sample_bilinear(const Image& img, std::size_t c, double sy, double sx) {
  const double maxy = static_cast<double>(img.height - 1);
  const double maxx = static_cast<double>(img.width - 1);
  sy = std::clamp(sy, 0.0, maxy);
  sx = std::clamp(sx, 0.0, maxx);
  const auto y0 = static_cast<std::size_t>(std::floor(sy));
  const auto x0 = static_cast<std::size_t>(std::floor(sx));
  const std::size_t y1 = std::min(y0 + 1, img.height - 1);
  const std::size_t x1 = std::min(x0 + 1, img.width - 1);
  const double fy = sy - static_cast<double>(y0);
  const double fx = sx - static_cast<double>(x0);
  return (1.0 - fy) * ((1.0 - fx) * img.at(c, y0, x0) + fx * img.at(c, y0, x1)) +
         fy * ((1.0 - fx) * img.at(c, y1, x0) + fx * img.at(c, y1, x1));
}

// Inverse-mapped geometric warp: out(y, x) = in(map(y, x)).
template <typename Map>
Image warp(const Image& img, Map&& map) {
  Image out(img.channels, img.height, img.width);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      const auto [sy, sx] = map(static_cast<double>(y), static_cast<double>(x));
      for (std::size_t c = 0; c < img.channels; ++c) {
        out.at(c, y, x) = clamp01(sample_bilinear(img, c, sy, sx));
      }
    }
  }
  return out;
}

// degenerate * (1 - factor) + img * factor; factor 1 returns img exactly.
Image blend(const Image& degenerate, const Image& img, double factor) {
  Image out = img;
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    out.pixels[i] = clamp01(degenerate.pixels[i] * (1.0 - factor) + img.pixels[i] * factor);
  }
  return out;
}

std::vector<double> luminance(const Image& img) {
  const std::size_t plane = img.height * img.width;
  std::vector<double> lum(plane);
  if (img.channels < 3) {
    for (std::size_t i = 0; i < plane; ++i) lum[i] = img.pixels[i];
    return lum;
  }
  for (std::size_t i = 0; i < plane; ++i) {
    lum[i] = 0.299 * img.pixels[i] + 0.587 * img.pixels[plane + i] + 0.114 * img.pixels[2 * plane + i];
  }
  return lum;
}

Image autocontrast(const Image& img) {
  Image out = img;
  const std::size_t plane = img.height * img.width;
  for (std::size_t c = 0; c < img.channels; ++c) {
    float* p = out.pixels.data() + c * plane;
    const auto [lo, hi] = std::minmax_element(p, p + plane);
    const double l = *lo;
    const double h = *hi;
    if (h <= l) continue;
    for (std::size_t i = 0; i < plane; ++i) p[i] = clamp01((p[i] - l) / (h - l));
  }
  return out;
}

// 256-level histogram equalization per channel, same lookup construction as
// PIL's ImageOps.equalize.
Image equalize(const Image& img) {
  Image out = img;
  const std::size_t plane = img.height * img.width;
  for (std::size_t c = 0; c < img.channels; ++c) {
    float* p = out.pixels.data() + c * plane;
    std::array<std::size_t, 256> hist{};
    for (std::size_t i = 0; i < plane; ++i) ++hist[static_cast<std::size_t>(quantize(p[i]))];
    std::size_t nonzero = 0;
    std::size_t last = 0;
    std::size_t total = 0;
    for (std::size_t v : hist) {
      if (v == 0) continue;
      ++nonzero;
      last = v;
      total += v;
    }
    if (nonzero <= 1) continue;
    const std::size_t step = (total - last) / 255;
    if (step == 0) continue;
    std::array<int, 256> lut{};
    std::size_t n = step / 2;
    for (std::size_t i = 0; i < 256; ++i) {
      lut[i] = static_cast<int>(std::min<std::size_t>(n / step, 255));
      n += hist[i];
    }
    for (std::size_t i = 0; i < plane; ++i) {
      p[i] = static_cast<float>(lut[static_cast<std::size_t>(quantize(p[i]))]) / 255.0f;
    }
  }
  return out;
}

Image posterize(const Image& img, int bits) {
  Image out = img;
  const int mask = (0xFF << (8 - bits)) & 0xFF;
  for (float& p : out.pixels) p = static_cast<float>(quantize(p) & mask) / 255.0f;
  return out;
}

// Inverts pixels whose 8-bit level reaches 256 * threshold, so threshold 0
// inverts everything and threshold 1 inverts nothing.
Image solarize(const Image& img, double threshold) {
  Image out = img;
  const double level = 256.0 * threshold;
  for (float& p : out.pixels) {
    if (static_cast<double>(quantize(p)) >= level) p = clamp01(1.0 - static_cast<double>(p));
  }
  return out;
}

Image smooth(const Image& img) {
  Image out = img;
  if (img.height < 3 || img.width < 3) return out;
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::size_t y = 1; y + 1 < img.height; ++y) {
      for (std::size_t x = 1; x + 1 < img.width; ++x) {
        double acc = 4.0 * img.at(c, y, x);
        for (std::size_t dy = 0; dy < 3; ++dy) {
          for (std::size_t dx = 0; dx < 3; ++dx) acc += img.at(c, y + dy - 1, x + dx - 1);
        }
        out.at(c, y, x) = clamp01(acc / 13.0);
      }
    }
  }
  return out;
}

Image constant_like(const Image& img, const std::vector<double>& per_pixel_gray) {
  Image out(img.channels, img.height, img.width);
  const std::size_t plane = img.height * img.width;
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::size_t i = 0; i < plane; ++i) out.pixels[c * plane + i] = static_cast<float>(per_pixel_gray[i]);
  }
  return out;
}

}  // namespace

void Image::validate() const {
  if (channels == 0 || height == 0 || width == 0) {
    throw ContractError("image dimensions must be positive");
  }
  if (pixels.size() != channels * height * width) {
    throw ContractError("image pixel count does not match its dimensions");
  }
  for (float p : pixels) {
    if (!(p >= 0.0f && p <= 1.0f)) throw ContractError("image pixel outside [0, 1]");
  }
}

Image image_from_batch(const Tensor<float>& batch, std::size_t n) {
  if (batch.rank() != 4 || n >= batch.dim(0)) {
    throw DimensionError("image_from_batch: index " + std::to_string(n) + " into " + shape_string(batch.shape()));
  }
  Image img(batch.dim(1), batch.dim(2), batch.dim(3));
  const std::size_t per = img.pixels.size();
  std::copy_n(batch.data().begin() + n * per, per, img.pixels.begin());
  return img;
}

void store_in_batch(const Image& img, Tensor<float>& batch, std::size_t n) {
  const std::size_t per = img.pixels.size();
  if (batch.rank() != 4 || n >= batch.dim(0) || batch.size() / batch.dim(0) != per) {
    throw DimensionError("store_in_batch: image does not fit " + shape_string(batch.shape()));
  }
  std::copy(img.pixels.begin(), img.pixels.end(), batch.data().begin() + n * per);
}

std::span<const TransformInfo> transform_table() { return kTable; }

const TransformInfo& transform_info(std::string_view name) {
  for (const TransformInfo& info : kTable) {
    if (info.name == name) return info;
  }
  throw ContractError("unknown transform '" + std::string(name) + "'");
}

Image apply_transform(const Image& img, const TransformSpec& spec) {
  const TransformInfo& info = transform_info(spec.name);
  const double v = spec.value;
  if (info.has_param && !(v >= info.domain_lo && v <= info.domain_hi)) {
    throw ContractError(spec.name + " parameter " + std::to_string(v) + " outside [" +
                        std::to_string(info.domain_lo) + ", " + std::to_string(info.domain_hi) + "]");
  }
  if (info.integer && v != std::floor(v)) {
    throw ContractError(spec.name + " parameter must be an integer");
  }
  const double cy = (static_cast<double>(img.height) - 1.0) / 2.0;
  const double cx = (static_cast<double>(img.width) - 1.0) / 2.0;
  switch (info.kind) {
    case TransformKind::kIdentity:
      return img;
    case TransformKind::kAutocontrast:
      return autocontrast(img);
    case TransformKind::kEqualize:
      return equalize(img);
    case TransformKind::kBrightness:
      return blend(Image(img.channels, img.height, img.width, 0.0f), img, v);
    case TransformKind::kColor:
      if (img.channels < 3) return img;
      return blend(constant_like(img, luminance(img)), img, v);
    case TransformKind::kContrast: {
      const auto lum = luminance(img);
      double mean = 0.0;
      for (double l : lum) mean += l;
      mean /= static_cast<double>(lum.size());
      return blend(constant_like(img, std::vector<double>(lum.size(), mean)), img, v);
    }
    case TransformKind::kSharpness:
      return blend(smooth(img), img, v);
    case TransformKind::kPosterize:
      return posterize(img, static_cast<int>(v));
    case TransformKind::kSolarize:
      return solarize(img, v);
    case TransformKind::kRotate: {
      const double rad = v * 3.14159265358979323846 / 180.0;
      const double cs = std::cos(rad);
      const double sn = std::sin(rad);
      return warp(img, [&](double y, double x) {
        const double dy = y - cy;
        const double dx = x - cx;
        return std::pair{-sn * dx + cs * dy + cy, cs * dx + sn * dy + cx};
      });
    }
    case TransformKind::kShearX:
      return warp(img, [&](double y, double x) { return std::pair{y, x + v * (y - cy)}; });
    case TransformKind::kShearY:
      return warp(img, [&](double y, double x) { return std::pair{y + v * (x - cx), x}; });
    case TransformKind::kTranslateX: {
      const double shift = v * static_cast<double>(img.width);
      return warp(img, [&](double y, double x) { return std::pair{y, x - shift}; });
    }
    case TransformKind::kTranslateY: {
      const double shift = v * static_cast<double>(img.height);
      return warp(img, [&](double y, double x) { return std::pair{y - shift, x}; });
    }
  }
  return img;
}

std::size_t weak_pad(std::size_t extent) { return (extent + 7) / 8; }

WeakParams sample_weak(Rng& rng, std::size_t height, std::size_t width) {
  WeakParams p;
  p.flip = rng.bernoulli(0.5);
  p.offset_y = static_cast<std::size_t>(rng.below(2 * weak_pad(height) + 1));
  p.offset_x = static_cast<std::size_t>(rng.below(2 * weak_pad(width) + 1));
  return p;
}

Image apply_weak(const Image& img, const WeakParams& params) {
  const std::size_t py = weak_pad(img.height);
  const std::size_t px = weak_pad(img.width);
  if (params.offset_y > 2 * py || params.offset_x > 2 * px) {
    throw ContractError("weak crop offset outside the padded image");
  }
  // Reflect without repeating the edge: index -1 maps to 1.
  auto reflect = [](std::ptrdiff_t i, std::size_t n) {
    const auto len = static_cast<std::ptrdiff_t>(n);
    if (len == 1) return std::size_t{0};
    const std::ptrdiff_t period = 2 * (len - 1);
    i %= period;
    if (i < 0) i += period;
    return static_cast<std::size_t>(i < len ? i : period - i);
  };
  Image out(img.channels, img.height, img.width);
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::size_t y = 0; y < img.height; ++y) {
      const std::size_t sy = reflect(static_cast<std::ptrdiff_t>(y + params.offset_y) - static_cast<std::ptrdiff_t>(py),
                                     img.height);
      for (std::size_t x = 0; x < img.width; ++x) {
        const std::size_t sx = reflect(
            static_cast<std::ptrdiff_t>(x + params.offset_x) - static_cast<std::ptrdiff_t>(px), img.width);
        out.at(c, y, params.flip ? img.width - 1 - x : x) = img.at(c, sy, sx);
      }
    }
  }
  return out;
}

Image weak_augment(const Image& img, Rng& rng) {
  return apply_weak(img, sample_weak(rng, img.height, img.width));
}

StrongPlan sample_strong(Rng& rng, std::size_t n_ops, bool cutout, std::size_t height, std::size_t width) {
  StrongPlan plan;
  for (std::size_t i = 0; i < n_ops; ++i) {
    const TransformInfo& info = kTable[rng.below(kTable.size())];
    TransformSpec spec{std::string(info.name), 0.0};
    if (info.has_param) {
      spec.value = info.integer ? info.lo + static_cast<double>(rng.below(static_cast<std::uint64_t>(info.hi - info.lo) + 1))
                                : rng.uniform(info.lo, info.hi);
    }
    plan.ops.push_back(std::move(spec));
  }
  if (cutout) {
    CutoutBox box;
    box.side = std::min(height, width) / 2;
    box.y = static_cast<std::size_t>(rng.below(height - box.side + 1));
    box.x = static_cast<std::size_t>(rng.below(width - box.side + 1));
    plan.cutout = box;
  }
  return plan;
}

Image apply_strong(const Image& img, const StrongPlan& plan) {
  Image out = img;
  for (const TransformSpec& spec : plan.ops) out = apply_transform(out, spec);
  if (plan.cutout) {
    const CutoutBox& b = *plan.cutout;
    if (b.y + b.side > out.height || b.x + b.side > out.width) {
      throw ContractError("cutout box outside the image");
    }
    for (std::size_t c = 0; c < out.channels; ++c) {
      for (std::size_t y = b.y; y < b.y + b.side; ++y) {
        for (std::size_t x = b.x; x < b.x + b.side; ++x) out.at(c, y, x) = 0.5f;
      }
    }
  }
  return out;
}

Image strong_augment(const Image& img, Rng& rng, std::size_t n_ops, bool cutout) {
  return apply_strong(img, sample_strong(rng, n_ops, cutout, img.height, img.width));
}

Rng sample_stream(std::uint64_t seed, std::uint64_t iteration, std::uint64_t stream, std::uint64_t index,
                  View view) {
  return Rng::stream({seed, iteration, stream, index, static_cast<std::uint64_t>(view)});
}

Tensor<float> augment_batch(const Tensor<float>& images, std::span<const std::size_t> indices, View view,
                            const AugmentOptions& options, std::uint64_t seed, std::uint64_t iteration,
                            std::uint64_t stream) {
  if (images.rank() != 4) {
    throw DimensionError("augment_batch expects [N,C,H,W], got " + shape_string(images.shape()));
  }
  for (std::size_t idx : indices) {
    if (idx >= images.dim(0)) throw DimensionError("augment_batch index out of range");
  }
  Tensor<float> out(Shape{indices.size(), images.dim(1), images.dim(2), images.dim(3)});
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      Rng rng = sample_stream(seed, iteration, stream, i, view);
      const Image src = image_from_batch(images, indices[i]);
      const Image dst = view == View::kWeak ? weak_augment(src, rng)
                                            : strong_augment(weak_augment(src, rng), rng, options.n_ops,
                                                             options.cutout);
      store_in_batch(dst, out, i);
    }
  };
  const std::size_t workers = std::clamp<std::size_t>(options.workers, 1, std::max<std::size_t>(indices.size(), 1));
  if (workers == 1) {
    work(0, indices.size());
    return out;
  }
  std::vector<std::thread> threads;
  const std::size_t per = (indices.size() + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = w * per;
    const std::size_t end = std::min(indices.size(), begin + per);
    if (begin >= end) break;
    threads.emplace_back(work, begin, end);
  }
  for (auto& t : threads) t.join();
  return out;
}

}  // namespace refix::augment
