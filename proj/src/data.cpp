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

#include "refix/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "refix/rng.hpp"

namespace refix::data {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[4] = {'R', 'F', 'X', 'T'};
constexpr std::uint8_t kVersion = 0x01;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::vector<std::uint8_t> encode_header(const Shape& shape, DType dtype) {
  if (shape.size() > 255) throw FormatError("tensor rank above 255 cannot be encoded");
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  out.push_back(kVersion);
  out.push_back(static_cast<std::uint8_t>(dtype));
  out.push_back(static_cast<std::uint8_t>(shape.size()));
  for (std::size_t d : shape) {
    if (d > 0xffffffffULL) throw FormatError("tensor extent does not fit 32 bits");
    put_u32(out, static_cast<std::uint32_t>(d));
  }
  return out;
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t manifest_size(const Manifest& m, const std::string& key, const fs::path& path) {
  auto it = m.find(key);
  if (it == m.end()) throw FormatError("manifest " + path.string() + " lacks key '" + key + "'");
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument(it->second);
    return static_cast<std::size_t>(v);
  } catch (const std::logic_error&) {
    throw FormatError("manifest " + path.string() + ": key '" + key + "' is not an integer");
  }
}

void write_labels(const fs::path& path, const std::vector<std::size_t>& labels, std::size_t classes) {
  if (classes <= 256) {
    std::vector<std::uint8_t> bytes(labels.begin(), labels.end());
    write_tensor_file_u8(path, Shape{labels.size()}, bytes);
    return;
  }
  Tensor<float> t(Shape{labels.size()});
  for (std::size_t i = 0; i < labels.size(); ++i) t[i] = static_cast<float>(labels[i]);
  write_tensor_file(path, t);
}

std::vector<std::size_t> read_labels(const fs::path& path) {
  const Tensor<float> t = read_tensor_file(path).as_float();
  std::vector<std::size_t> labels(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i] < 0.0f || t[i] != std::floor(t[i])) throw FormatError("label file " + path.string() + " holds a non-label value");
    labels[i] = static_cast<std::size_t>(t[i]);
  }
  return labels;
}

fs::path resolve(const fs::path& manifest_path, const std::string& rel) {
  const fs::path p(rel);
  return p.is_absolute() ? p : manifest_path.parent_path() / p;
}

// Per-class index lists, each shuffled with its own stream.
std::vector<std::vector<std::size_t>> shuffled_by_class(const std::vector<std::size_t>& labels, std::size_t classes,
                                                        std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  for (std::size_t c = 0; c < classes; ++c) {
    Rng rng = Rng::stream({seed, 0x5b117ULL, c});
    rng.shuffle(by_class[c].begin(), by_class[c].end());
  }
  return by_class;
}

SplitResult assemble_split(const Dataset& ds, std::vector<std::size_t> labeled_idx,
                           std::vector<std::size_t> unlabeled_idx) {
  std::sort(labeled_idx.begin(), labeled_idx.end());
  std::sort(unlabeled_idx.begin(), unlabeled_idx.end());
  SplitResult r;
  r.labeled = ds.subset(labeled_idx);
  Dataset u = ds.subset(unlabeled_idx);
  u.truth = HiddenTruth(std::move(u.labels));
  u.labels.clear();
  r.unlabeled = std::move(u);
  r.labeled_per_class.assign(ds.classes, 0);
  r.unlabeled_per_class.assign(ds.classes, 0);
  for (std::size_t i : labeled_idx) ++r.labeled_per_class[ds.labels[i]];
  for (std::size_t i : unlabeled_idx) ++r.unlabeled_per_class[ds.labels[i]];
  return r;
}

}  // namespace

Tensor<float> TensorFile::as_float() const {
  if (dtype == DType::kF32) return Tensor<float>(shape, f32);
  return Tensor<float>(shape, std::vector<float>(u8.begin(), u8.end()));
}

std::vector<std::uint8_t> encode_tensor(const Tensor<float>& t) {
  std::vector<std::uint8_t> out = encode_header(t.shape(), DType::kF32);
  for (float v : t.data()) {
    std::uint32_t bits = 0;
    std::memcpy(&bits, &v, sizeof bits);
    put_u32(out, bits);
  }
  return out;
}

std::vector<std::uint8_t> encode_tensor_u8(const Shape& shape, std::span<const std::uint8_t> values) {
  if (shape_size(shape) != values.size()) {
    throw DimensionError("u8 tensor payload does not match shape " + shape_string(shape));
  }
  std::vector<std::uint8_t> out = encode_header(shape, DType::kU8);
  out.insert(out.end(), values.begin(), values.end());
  return out;
}

TensorFile decode_tensor(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("bad magic at offset 0 (expected \"RFXT\")");
  }
  if (bytes.size() < 7) throw FormatError("truncated header at offset " + std::to_string(bytes.size()));
  if (bytes[4] != kVersion) throw FormatError("unsupported version " + std::to_string(bytes[4]) + " at offset 4");
  if (bytes[5] > 1) throw FormatError("unknown dtype " + std::to_string(bytes[5]) + " at offset 5");
  TensorFile tf;
  tf.dtype = static_cast<DType>(bytes[5]);
  const std::size_t ndim = bytes[6];
  std::size_t offset = 7;
  if (bytes.size() < offset + 4 * ndim) {
    throw FormatError("truncated extents at offset " + std::to_string(bytes.size()));
  }
  for (std::size_t i = 0; i < ndim; ++i, offset += 4) tf.shape.push_back(get_u32(bytes.data() + offset));
  const std::size_t count = shape_size(tf.shape);
  const std::size_t width = tf.dtype == DType::kU8 ? 1 : 4;
  if (bytes.size() - offset != count * width) {
    throw FormatError((bytes.size() - offset < count * width ? "truncated payload at offset "
                                                               : "trailing bytes after payload at offset ") +
                      std::to_string(std::min(bytes.size(), offset + count * width)));
  }
  if (tf.dtype == DType::kU8) {
    tf.u8.assign(bytes.begin() + static_cast<std::ptrdiff_t>(offset), bytes.end());
  } else {
    tf.f32.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
      const std::uint32_t bits = get_u32(bytes.data() + offset + 4 * i);
      std::memcpy(&tf.f32[i], &bits, sizeof bits);
    }
  }
  return tf;
}

void write_tensor_file(const fs::path& path, const Tensor<float>& t) { write_bytes(path, encode_tensor(t)); }

void write_tensor_file_u8(const fs::path& path, const Shape& shape, std::span<const std::uint8_t> values) {
  write_bytes(path, encode_tensor_u8(shape, values));
}

TensorFile read_tensor_file(const fs::path& path) {
  const auto bytes = read_bytes(path);
  try {
    return decode_tensor(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

Manifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  Manifest m;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected key=value");
    }
    m[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return m;
}

void write_manifest(const fs::path& path, const Manifest& manifest) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write manifest " + path.string());
  for (const auto& [k, v] : manifest) out << k << '=' << v << '\n';
}

void Dataset::validate() const {
  if (images.rank() != 4) throw DataError("dataset images must be [N,C,H,W], got " + shape_string(images.shape()));
  if (classes < 2) throw DataError("dataset needs at least 2 classes");
  if (!labels.empty() && labels.size() != size()) {
    throw DataError("dataset has " + std::to_string(size()) + " images but " + std::to_string(labels.size()) +
                    " labels");
  }
  if (truth.available() && truth.size() != size()) throw DataError("hidden truth length does not match images");
  for (std::size_t y : labels) {
    if (y >= classes) throw DataError("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
  }
  for (float p : images.data()) {
    if (!(p >= 0.0f && p <= 1.0f)) throw DataError("dataset pixel outside [0, 1]");
  }
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  const std::size_t per = size() == 0 ? 0 : images.size() / size();
  std::vector<float> pix;
  pix.reserve(indices.size() * per);
  Dataset out;
  out.classes = classes;
  std::vector<std::size_t> truth_out;
  const std::vector<std::size_t>& hidden = truth.reveal(TruthKey{});
  for (std::size_t i : indices) {
    if (i >= size()) throw DataError("subset index " + std::to_string(i) + " out of range");
    pix.insert(pix.end(), images.data().begin() + i * per, images.data().begin() + (i + 1) * per);
    if (!labels.empty()) out.labels.push_back(labels[i]);
    if (!hidden.empty()) truth_out.push_back(hidden[i]);
  }
  out.images = Tensor<float>(Shape{indices.size(), images.dim(1), images.dim(2), images.dim(3)}, std::move(pix));
  out.truth = HiddenTruth(std::move(truth_out));
  return out;
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(classes, 0);
  for (std::size_t y : labels) ++counts.at(y);
  return counts;
}

fs::path DatasetIo::save(const Dataset& ds, const fs::path& dir, const std::string& stem) {
  ds.validate();
  fs::create_directories(dir);
  Manifest m;
  m["images"] = stem + ".images.rfxt";
  write_tensor_file(dir / m["images"], ds.images);
  if (ds.labeled()) {
    m["labels"] = stem + ".labels.rfxt";
    write_labels(dir / m["labels"], ds.labels, ds.classes);
  }
  if (ds.truth.available()) {
    m["truth"] = stem + ".truth.rfxt";
    write_labels(dir / m["truth"], ds.truth.reveal(TruthKey{}), ds.classes);
  }
  m["K"] = std::to_string(ds.classes);
  m["N"] = std::to_string(ds.size());
  m["C"] = std::to_string(ds.channels());
  m["H"] = std::to_string(ds.height());
  m["W"] = std::to_string(ds.width());
  const fs::path path = dir / (stem + ".manifest");
  write_manifest(path, m);
  return path;
}

Dataset DatasetIo::load(const fs::path& manifest_path) {
  if (!fs::exists(manifest_path)) throw DataError("dataset manifest not found: " + manifest_path.string());
  const Manifest m = read_manifest(manifest_path);
  auto require_file = [&](const std::string& key) {
    auto it = m.find(key);
    if (it == m.end()) throw FormatError("manifest " + manifest_path.string() + " lacks key '" + key + "'");
    const fs::path p = resolve(manifest_path, it->second);
    if (!fs::exists(p)) throw DataError("dataset file not found: " + p.string());
    return p;
  };
  Dataset ds;
  ds.classes = manifest_size(m, "K", manifest_path);
  ds.images = read_tensor_file(require_file("images")).as_float();
  const Shape expected{ds.images.rank() == 4 ? ds.images.dim(0) : 0, manifest_size(m, "C", manifest_path),
                       manifest_size(m, "H", manifest_path), manifest_size(m, "W", manifest_path)};
  if (ds.images.shape() != expected) {
    throw DataError("images in " + manifest_path.string() + " have shape " + shape_string(ds.images.shape()) +
                    ", manifest says " + shape_string(expected));
  }
  if (m.count("labels")) ds.labels = read_labels(require_file("labels"));
  if (m.count("truth")) ds.truth = HiddenTruth(read_labels(require_file("truth")));
  ds.validate();
  return ds;
}

SplitResult balanced_split(const Dataset& ds, std::size_t per_class, std::uint64_t seed) {
  if (!ds.labeled()) throw DataError("balanced_split needs a labeled dataset");
  if (per_class == 0) throw DataError("labels per class must be at least 1");
  const auto by_class = shuffled_by_class(ds.labels, ds.classes, seed);
  std::vector<std::size_t> labeled;
  std::vector<std::size_t> unlabeled;
  for (std::size_t c = 0; c < ds.classes; ++c) {
    if (by_class[c].size() < per_class) {
      throw DataError("class " + std::to_string(c) + " has " + std::to_string(by_class[c].size()) +
                      " samples, fewer than the " + std::to_string(per_class) + " labels requested");
    }
    labeled.insert(labeled.end(), by_class[c].begin(), by_class[c].begin() + static_cast<std::ptrdiff_t>(per_class));
    unlabeled.insert(unlabeled.end(), by_class[c].begin() + static_cast<std::ptrdiff_t>(per_class), by_class[c].end());
  }
  return assemble_split(ds, std::move(labeled), std::move(unlabeled));
}

std::vector<std::size_t> long_tailed_counts(std::size_t n1, double imbalance, std::size_t classes) {
  if (n1 < 1) throw ContractError("N1 must be at least 1");
  if (!(imbalance >= 1.0)) throw ContractError("imbalance ratio must be at least 1");
  if (classes < 2) throw ContractError("long-tailed split needs at least 2 classes");
  std::vector<std::size_t> counts(classes);
  for (std::size_t k = 0; k < classes; ++k) {
    const double exponent = -static_cast<double>(k) / static_cast<double>(classes - 1);
    const double nk = static_cast<double>(n1) * std::pow(imbalance, exponent);
    counts[k] = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(nk)));
  }
  return counts;
}

SplitResult long_tailed_split(const Dataset& ds, std::size_t n1, double imbalance, double labeled_fraction,
                              std::uint64_t seed) {
  if (!ds.labeled()) throw DataError("long_tailed_split needs a labeled dataset");
  if (!(labeled_fraction > 0.0 && labeled_fraction <= 1.0)) {
    throw ContractError("labeled fraction must be in (0, 1]");
  }
  const auto counts = long_tailed_counts(n1, imbalance, ds.classes);
  const auto by_class = shuffled_by_class(ds.labels, ds.classes, seed);
  std::vector<std::size_t> labeled;
  std::vector<std::size_t> unlabeled;
  for (std::size_t c = 0; c < ds.classes; ++c) {
    if (by_class[c].size() < counts[c]) {
      throw DataError("class " + std::to_string(c) + " has " + std::to_string(by_class[c].size()) +
                      " samples, the long-tailed profile needs " + std::to_string(counts[c]));
    }
    const auto n_lab = static_cast<std::size_t>(std::llround(labeled_fraction * static_cast<double>(counts[c])));
    labeled.insert(labeled.end(), by_class[c].begin(), by_class[c].begin() + static_cast<std::ptrdiff_t>(n_lab));
    unlabeled.insert(unlabeled.end(), by_class[c].begin() + static_cast<std::ptrdiff_t>(n_lab),
                     by_class[c].begin() + static_cast<std::ptrdiff_t>(counts[c]));
  }
  return assemble_split(ds, std::move(labeled), std::move(unlabeled));
}

// ---------------------------------------------------------------------------
// Synthetic generators

namespace {

struct Glyph {
  double cx, cy;   // center, pixels
  double s;        // half extent
  double t;        // half stroke width
};

// True when point (x, y) lies on glyph `family`.
bool on_glyph(std::size_t family, const Glyph& g, double x, double y) {
  const double dx = x - g.cx;
  const double dy = y - g.cy;
  const double ax = std::fabs(dx);
  const double ay = std::fabs(dy);
  const double r = std::hypot(dx, dy);
  auto hbar = [&](double yoff) { return std::fabs(dy - yoff) <= g.t && ax <= g.s; };
  auto vbar = [&](double xoff) { return std::fabs(dx - xoff) <= g.t && ay <= g.s; };
  switch (family) {
    case 0: return hbar(0);
    case 1: return vbar(0);
    case 2: return std::fabs(r - 0.8 * g.s) <= g.t;
    case 3: return r <= 0.75 * g.s;
    case 4: return hbar(0) || vbar(0);
    case 5: {
      const double lim = 0.85 * g.s;
      return ax <= lim && ay <= lim && (std::fabs(dx - dy) <= g.t * 1.414 || std::fabs(dx + dy) <= g.t * 1.414);
    }
    case 6: return std::fabs(std::max(ax, ay) - 0.8 * g.s) <= g.t;
    case 7: return std::max(ax, ay) <= 0.6 * g.s;
    case 8: return dy >= -g.s && dy <= 0.8 * g.s && ax <= 0.5 * (dy + g.s) * 0.6;  // apex up
    case 9: return dy <= g.s && dy >= -0.8 * g.s && ax <= 0.5 * (g.s - dy) * 0.6;  // apex down
    case 10: return hbar(-g.s + g.t) || (vbar(0) && dy >= -g.s + g.t);
    case 11: return hbar(-0.45 * g.s) || hbar(0.45 * g.s);
    default: return false;
  }
}

constexpr std::size_t kShapeFamilies = 12;

void render_shape(std::size_t family, std::size_t size, std::size_t channels, Rng& rng, float* out) {
  const double sz = static_cast<double>(size);
  Glyph g;
  g.cx = sz / 2.0 + rng.uniform(-sz / 8.0, sz / 8.0);
  g.cy = sz / 2.0 + rng.uniform(-sz / 8.0, sz / 8.0);
  g.s = sz * rng.uniform(0.26, 0.38);
  g.t = std::max(0.75, sz * rng.uniform(0.05, 0.08));
  const double background = rng.uniform(0.0, 0.2);
  std::vector<double> ink(channels);
  for (double& v : ink) v = rng.uniform(0.65, 1.0);
  const std::size_t plane = size * size;
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      // 2x2 supersampled coverage
      int hits = 0;
      for (int sy = 0; sy < 2; ++sy) {
        for (int sx = 0; sx < 2; ++sx) {
          hits += on_glyph(family, g, static_cast<double>(x) + 0.25 + 0.5 * sx, static_cast<double>(y) + 0.25 + 0.5 * sy);
        }
      }
      const double cover = hits / 4.0;
      for (std::size_t c = 0; c < channels; ++c) {
        const double v = background + cover * (ink[c] - background) + 0.05 * rng.normal();
        out[c * plane + y * size + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
}

void render_moons(std::size_t label, std::size_t size, std::size_t channels, Rng& rng, float* out) {
  const std::size_t plane = size * size;
  std::vector<double> canvas(plane, 0.0);
  const double sz = static_cast<double>(size);
  const double jx = rng.uniform(-0.15, 0.15);
  const double jy = rng.uniform(-0.15, 0.15);
  for (int p = 0; p < 24; ++p) {
    const double theta = rng.uniform(0.0, 3.14159265358979323846);
    double mx = label == 0 ? std::cos(theta) : 1.0 - std::cos(theta);
    double my = label == 0 ? std::sin(theta) : 0.5 - std::sin(theta);
    mx += 0.1 * rng.normal() + jx;
    my += 0.1 * rng.normal() + jy;
    // [-1.25, 2.25] x [-0.85, 1.35] onto the canvas, y pointing down
    const double px = (mx + 1.25) / 3.5 * sz;
    const double py = (1.35 - my) / 2.2 * sz;
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const double d2 = std::pow(static_cast<double>(x) + 0.5 - px, 2) + std::pow(static_cast<double>(y) + 0.5 - py, 2);
        canvas[y * size + x] += 0.6 * std::exp(-d2 / 0.8);
      }
    }
  }
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t i = 0; i < plane; ++i) {
      out[c * plane + i] = static_cast<float>(std::clamp(canvas[i] + 0.05 * rng.normal(), 0.0, 1.0));
    }
  }
}

}  // namespace

std::size_t shape_family_count() { return kShapeFamilies; }

Dataset generate_synthetic(const std::string& kind, std::size_t classes, std::size_t count, std::size_t size,
                           std::uint64_t seed, std::size_t channels) {
  if (kind != "shapes" && kind != "moons-img") {
    throw ContractError("unknown dataset kind '" + kind + "' (expected shapes or moons-img)");
  }
  if (size < 8) throw ContractError("synthetic image size must be at least 8");
  if (channels != 1 && channels != 3) throw ContractError("synthetic images have 1 or 3 channels");
  if (kind == "shapes" && (classes < 2 || classes > kShapeFamilies)) {
    throw ContractError("shapes supports 2.." + std::to_string(kShapeFamilies) + " classes, got " +
                        std::to_string(classes));
  }
  if (kind == "moons-img" && classes != 2) throw ContractError("moons-img has exactly 2 classes");

  Dataset ds;
  ds.classes = classes;
  ds.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) ds.labels[i] = i % classes;
  Rng order = Rng::stream({seed, 0x0de7ULL});
  order.shuffle(ds.labels.begin(), ds.labels.end());

  ds.images = Tensor<float>(Shape{count, channels, size, size});
  const std::size_t per = channels * size * size;
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = Rng::stream({seed, 0x9a1eULL, i});
    float* out = ds.images.data().data() + i * per;
    if (kind == "shapes") {
      render_shape(ds.labels[i], size, channels, rng, out);
    } else {
      render_moons(ds.labels[i], size, channels, rng, out);
    }
  }
  return ds;
}

}  // namespace refix::data
