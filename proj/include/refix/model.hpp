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
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "refix/ops.hpp"
#include "refix/tape.hpp"
#include "refix/tensor.hpp"

namespace refix::models {

enum class Arch { kMlp, kSmallConv };

std::string arch_name(Arch arch);
Arch parse_arch(const std::string& name);

// Architecture description.
//   mlp:       flatten -> [linear -> relu] per hidden width -> linear(K)
//   smallconv: conv3x3(widths[0]) -> relu -> maxpool2 -> conv3x3(widths[1])
//              -> relu -> maxpool2 -> flatten -> linear(K)
// Inputs are normalized per channel with fixed (mean, std) before the first
// layer.
struct ModelSpec {
  Arch arch = Arch::kSmallConv;
  std::vector<std::size_t> widths{16, 32};
  std::size_t channels = 1;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t classes = 10;
  std::vector<double> norm_mean{0.5};
  std::vector<double> norm_std{0.25};

  void validate() const;
  Shape input_shape(std::size_t batch) const { return {batch, channels, height, width}; }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

template <typename T>
using ParamMap = std::map<std::string, Tensor<T>>;

template <typename T>
using ParamVars = std::map<std::string, grad::Var<T>>;

// Trainable parameters, their EMA shadow and the SGD momentum buffers. The
// three maps always share keys and shapes.
template <typename T>
struct ModelState {
  ModelSpec spec;
  ParamMap<T> params;
  ParamMap<T> ema;
  ParamMap<T> momentum;
};

// Names and shapes of every parameter of spec, in a fixed order.
std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelSpec& spec);

// Deterministic in seed. Weights ~ U(-b, b) with b = sqrt(6 / fan_in), biases 0.
template <typename T>
ModelState<T> init(const ModelSpec& spec, std::uint64_t seed);

// Bound of the fan-in uniform scheme for a parameter of the given shape.
double init_bound(const Shape& weight_shape);

template <typename T>
ParamVars<T> bind(grad::Tape<T>& tape, const ParamMap<T>& params);

// Logits [N,K] for a batch [N,C,H,W], recorded on tape.
template <typename T>
grad::Var<T> forward(grad::Tape<T>& tape, const ModelSpec& spec, const ParamVars<T>& params,
                     const Tensor<T>& input);

template <typename T>
struct ForwardResult {
  std::unique_ptr<grad::Tape<T>> tape;  // null unless recorded
  ParamVars<T> params;
  grad::Var<T> logits_var;
  Tensor<T> logits;
};

// use_ema selects the shadow weights and never records a tape.
template <typename T>
ForwardResult<T> forward(const ModelState<T>& state, const Tensor<T>& input, bool use_ema,
                         bool record);

// Gradient-free inference in chunks; results do not depend on the chunk size.
template <typename T>
Tensor<T> infer(const ModelSpec& spec, const ParamMap<T>& params, const Tensor<T>& input,
                std::size_t chunk = 256);

// ema <- m * ema + (1 - m) * param for every key. Requires 0 <= m < 1.
template <typename T>
void ema_update(ModelState<T>& state, double momentum);

template <typename T>
void check_consistent(const ModelState<T>& state);

}  // namespace refix::models
