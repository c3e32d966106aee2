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

#include "refix/model.hpp"

#include <cmath>

#include "refix/rng.hpp"

namespace refix::models {

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

bool is_bias(const std::string& name) {
  return name.size() >= 5 && name.compare(name.size() - 5, 5, ".bias") == 0;
}

}  // namespace

std::string arch_name(Arch arch) { return arch == Arch::kMlp ? "mlp" : "smallconv"; }

Arch parse_arch(const std::string& name) {
  if (name == "mlp") return Arch::kMlp;
  if (name == "smallconv") return Arch::kSmallConv;
  throw ContractError("unknown architecture '" + name + "' (expected mlp or smallconv)");
}

void ModelSpec::validate() const {
  if (classes < 2) {
    throw ContractError("model needs at least 2 classes, got " + std::to_string(classes));
  }
  if (channels == 0 || height == 0 || width == 0) {
    throw ContractError("model input extents must be positive");
  }
  for (std::size_t w : widths) {
    if (w == 0) throw ContractError("layer widths must be positive");
  }
  if (arch == Arch::kSmallConv) {
    if (widths.size() != 2) {
      throw ContractError("smallconv takes exactly two channel widths, got " + std::to_string(widths.size()));
    }
    if (height < 4 || width < 4) {
      throw ContractError("smallconv needs inputs of at least 4x4");
    }
  }
  auto check_norm = [this](const std::vector<double>& v, const char* what) {
    if (v.size() != 1 && v.size() != channels) {
      throw ContractError(std::string(what) + " must have 1 or C entries");
    }
  };
  check_norm(norm_mean, "norm_mean");
  check_norm(norm_std, "norm_std");
  for (double s : norm_std) {
    if (!(s > 0.0)) throw ContractError("norm_std entries must be positive");
  }
}

std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelSpec& spec) {
  spec.validate();
  std::vector<std::pair<std::string, Shape>> layout;
  if (spec.arch == Arch::kSmallConv) {
    const std::size_t c1 = spec.widths[0];
    const std::size_t c2 = spec.widths[1];
    const std::size_t flat = c2 * (spec.height / 2 / 2) * (spec.width / 2 / 2);
    layout.push_back({"conv1.weight", {c1, spec.channels, 3, 3}});
    layout.push_back({"conv1.bias", {c1}});
    layout.push_back({"conv2.weight", {c2, c1, 3, 3}});
    layout.push_back({"conv2.bias", {c2}});
    layout.push_back({"fc.weight", {flat, spec.classes}});
    layout.push_back({"fc.bias", {spec.classes}});
    return layout;
  }
  std::size_t in = spec.channels * spec.height * spec.width;
  for (std::size_t i = 0; i < spec.widths.size(); ++i) {
    const std::string name = "fc" + std::to_string(i + 1);
    layout.push_back({name + ".weight", {in, spec.widths[i]}});
    layout.push_back({name + ".bias", {spec.widths[i]}});
    in = spec.widths[i];
  }
  layout.push_back({"out.weight", {in, spec.classes}});
  layout.push_back({"out.bias", {spec.classes}});
  return layout;
}

double init_bound(const Shape& weight_shape) {
  // Linear weights are [in, out]; conv kernels are [F, C, kh, kw].
  const std::size_t fan_in = weight_shape.size() == 4
                                 ? weight_shape[1] * weight_shape[2] * weight_shape[3]
                                 : weight_shape.at(0);
  return std::sqrt(6.0 / static_cast<double>(fan_in));
}

template <typename T>
ModelState<T> init(const ModelSpec& spec, std::uint64_t seed) {
  ModelState<T> state;
  state.spec = spec;
  for (const auto& [name, shape] : parameter_layout(spec)) {
    Tensor<T> t(shape);
    if (!is_bias(name)) {
      const double bound = init_bound(shape);
      Rng rng = Rng::stream({seed, fnv1a(name)});
      for (T& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
    }
    state.params.emplace(name, t);
    state.ema.emplace(name, t);
    state.momentum.emplace(name, Tensor<T>(shape));
  }
  return state;
}

template <typename T>
ParamVars<T> bind(grad::Tape<T>& tape, const ParamMap<T>& params) {
  ParamVars<T> vars;
  for (const auto& [name, value] : params) {
    vars.emplace(name, tape.parameter(value));
  }
  return vars;
}

namespace {

template <typename T>
const grad::Var<T>& param(const ParamVars<T>& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) {
    throw ContractError("missing model parameter '" + name + "'");
  }
  return it->second;
}

template <typename T>
Tensor<T> normalize(const ModelSpec& spec, const Tensor<T>& input) {
  const Shape expected = spec.input_shape(input.rank() == 4 ? input.dim(0) : 0);
  if (input.shape() != expected) {
    throw DimensionError("model input shape " + shape_string(input.shape()) + " does not match " +
                         shape_string(expected));
  }
  Tensor<T> out = input;
  const std::size_t plane = spec.height * spec.width;
  auto d = out.data();
  for (std::size_t n = 0; n < input.dim(0); ++n) {
    for (std::size_t c = 0; c < spec.channels; ++c) {
      const T m = static_cast<T>(spec.norm_mean.size() == 1 ? spec.norm_mean[0] : spec.norm_mean[c]);
      const T s = static_cast<T>(spec.norm_std.size() == 1 ? spec.norm_std[0] : spec.norm_std[c]);
      T* p = d.data() + (n * spec.channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] = (p[i] - m) / s;
    }
  }
  return out;
}

}  // namespace

template <typename T>
grad::Var<T> forward(grad::Tape<T>& tape, const ModelSpec& spec, const ParamVars<T>& params,
                     const Tensor<T>& input) {
  using grad::Var;
  const std::size_t n = input.rank() == 4 ? input.dim(0) : 0;
  Var<T> x = tape.constant(normalize(spec, input));
  if (spec.arch == Arch::kSmallConv) {
    const Var<T> b1 = reshape(param(params, "conv1.bias"), Shape{1, spec.widths[0], 1, 1});
    x = grad::max_pool2(grad::relu(grad::conv2d(x, param(params, "conv1.weight"), 1, 1) + b1));
    const Var<T> b2 = reshape(param(params, "conv2.bias"), Shape{1, spec.widths[1], 1, 1});
    x = grad::max_pool2(grad::relu(grad::conv2d(x, param(params, "conv2.weight"), 1, 1) + b2));
    x = grad::reshape(x, Shape{n, x.value().size() / std::max<std::size_t>(n, 1)});
    return grad::matmul(x, param(params, "fc.weight")) + param(params, "fc.bias");
  }
  x = grad::reshape(x, Shape{n, spec.channels * spec.height * spec.width});
  for (std::size_t i = 0; i < spec.widths.size(); ++i) {
    const std::string name = "fc" + std::to_string(i + 1);
    x = grad::relu(grad::matmul(x, param(params, name + ".weight")) + param(params, name + ".bias"));
  }
  return grad::matmul(x, param(params, "out.weight")) + param(params, "out.bias");
}

template <typename T>
ForwardResult<T> forward(const ModelState<T>& state, const Tensor<T>& input, bool use_ema,
                         bool record) {
  ForwardResult<T> result;
  const bool recording = record && !use_ema;
  auto tape = std::make_unique<grad::Tape<T>>(recording);
  result.params = bind(*tape, use_ema ? state.ema : state.params);
  result.logits_var = forward(*tape, state.spec, result.params, input);
  result.logits = result.logits_var.value();
  if (recording) {
    result.tape = std::move(tape);
  } else {
    result.params.clear();
    result.logits_var = {};
  }
  return result;
}

template <typename T>
Tensor<T> infer(const ModelSpec& spec, const ParamMap<T>& params, const Tensor<T>& input,
                std::size_t chunk) {
  if (input.rank() != 4) {
    throw DimensionError("infer expects [N,C,H,W], got " + shape_string(input.shape()));
  }
  const std::size_t n = input.dim(0);
  const std::size_t per = input.size() / std::max<std::size_t>(n, 1);
  Tensor<T> logits(Shape{n, spec.classes});
  chunk = std::max<std::size_t>(chunk, 1);
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t count = std::min(chunk, n - start);
    std::vector<T> slice(input.data().begin() + start * per, input.data().begin() + (start + count) * per);
    Tensor<T> batch(spec.input_shape(count), std::move(slice));
    grad::Tape<T> tape(false);
    const auto vars = bind(tape, params);
    const auto out = forward(tape, spec, vars, batch).value().data();
    std::copy(out.begin(), out.end(), logits.data().begin() + start * spec.classes);
  }
  return logits;
}

template <typename T>
void ema_update(ModelState<T>& state, double momentum) {
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw ContractError("EMA momentum must be in [0, 1), got " + std::to_string(momentum));
  }
  const T m = static_cast<T>(momentum);
  const T rest = static_cast<T>(1.0 - momentum);
  for (auto& [name, shadow] : state.ema) {
    const auto p = state.params.at(name).data();
    auto e = shadow.data();
    for (std::size_t i = 0; i < e.size(); ++i) e[i] = m * e[i] + rest * p[i];
  }
}

template <typename T>
void check_consistent(const ModelState<T>& state) {
  const auto layout = parameter_layout(state.spec);
  for (const ParamMap<T>* map : {&state.params, &state.ema, &state.momentum}) {
    if (map->size() != layout.size()) {
      throw ContractError("model state has " + std::to_string(map->size()) + " tensors, expected " +
                          std::to_string(layout.size()));
    }
    for (const auto& [name, shape] : layout) {
      auto it = map->find(name);
      if (it == map->end() || it->second.shape() != shape) {
        throw ContractError("model state tensor '" + name + "' missing or misshaped");
      }
    }
  }
}

#define REFIX_INSTANTIATE_MODELS(T)                                                                 \
  template ModelState<T> init<T>(const ModelSpec&, std::uint64_t);                                  \
  template ParamVars<T> bind<T>(grad::Tape<T>&, const ParamMap<T>&);                                \
  template grad::Var<T> forward<T>(grad::Tape<T>&, const ModelSpec&, const ParamVars<T>&,           \
                                   const Tensor<T>&);                                               \
  template ForwardResult<T> forward<T>(const ModelState<T>&, const Tensor<T>&, bool, bool);         \
  template Tensor<T> infer<T>(const ModelSpec&, const ParamMap<T>&, const Tensor<T>&, std::size_t); \
  template void ema_update<T>(ModelState<T>&, double);                                              \
  template void check_consistent<T>(const ModelState<T>&);

REFIX_INSTANTIATE_MODELS(float)
REFIX_INSTANTIATE_MODELS(double)

}  // namespace refix::models
