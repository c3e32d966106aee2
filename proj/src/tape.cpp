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

#include "refix/tape.hpp"

#include <algorithm>

namespace refix::grad {

std::string_view op_name(OpKind op) {
  switch (op) {
    case OpKind::kConstant: return "constant";
    case OpKind::kParameter: return "parameter";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kDivScalar: return "div_scalar";
    case OpKind::kRelu: return "relu";
    case OpKind::kSum: return "sum";
    case OpKind::kSumAxis: return "sum_axis";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kMaxPool2: return "max_pool2";
    case OpKind::kLogSoftmax: return "log_softmax";
    case OpKind::kGather: return "gather";
    case OpKind::kReshape: return "reshape";
    case OpKind::kStopGradient: return "stop_gradient";
  }
  return "unknown";
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  return record(OpKind::kConstant, {}, std::move(value), nullptr);
}

template <typename T>
Var<T> Tape<T>::parameter(Tensor<T> value) {
  Var<T> v = record(OpKind::kParameter, {}, std::move(value), nullptr);
  nodes_.back().requires_grad = grad_enabled_;
  return v;
}

template <typename T>
bool Tape<T>::any_requires_grad(const std::vector<std::size_t>& ids) const {
  return std::any_of(ids.begin(), ids.end(), [this](std::size_t id) { return requires_grad(id); });
}

template <typename T>
Var<T> Tape<T>::record(OpKind op, std::vector<std::size_t> inputs, Tensor<T> value,
                       BackwardFn backward) {
  for (std::size_t id : inputs) {
    if (id >= nodes_.size()) {
      throw ContractError("tape input id " + std::to_string(id) + " is not recorded yet");
    }
  }
  if (!value.all_finite()) {
    throw NumericError("non-finite value produced by " + std::string(op_name(op)) + " at node " +
                       std::to_string(nodes_.size()));
  }
  const bool needs = grad_enabled_ && op != OpKind::kStopGradient && any_requires_grad(inputs);
  nodes_.push_back(Node{op, std::move(inputs), std::move(value), needs,
                        needs ? std::move(backward) : BackwardFn{}});
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Gradients<T> Tape<T>::backward(Var<T> loss) const {
  if (loss.tape != this) {
    throw ContractError("backward: loss node belongs to another tape");
  }
  const Tensor<T>& lv = value(loss.id);
  if (lv.size() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_string(lv.shape()));
  }
  std::vector<Tensor<T>> grads(nodes_.size());
  std::vector<Shape> shapes(nodes_.size());
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    shapes[i] = nodes_[i].value.shape();
  }
  if (!requires_grad(loss.id)) {
    return Gradients<T>(std::move(grads), std::move(shapes));
  }
  grads[loss.id] = Tensor<T>(lv.shape(), T{1});
  GradBuffer<T> buffer(*this, grads);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    const Node& node = nodes_[i];
    if (!node.backward || grads[i].empty()) {
      continue;
    }
    node.backward(grads[i], buffer);
  }
  return Gradients<T>(std::move(grads), std::move(shapes));
}

template class Tape<float>;
template class Tape<double>;

}  // namespace refix::grad
