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
#include <deque>
#include <functional>
#include <string_view>
#include <vector>

#include "refix/tensor.hpp"

namespace refix::grad {

enum class OpKind : std::uint8_t {
  kConstant,
  kParameter,
  kAdd,
  kSub,
  kMul,
  kScale,
  kDivScalar,
  kRelu,
  kSum,
  kSumAxis,
  kMatmul,
  kConv2d,
  kMaxPool2,
  kLogSoftmax,
  kGather,
  kReshape,
  kStopGradient,
};

std::string_view op_name(OpKind op);

template <typename T>
class Tape;

// Handle to a node of a tape. Cheap to copy; valid while the tape lives.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return tape->value(id).shape(); }
};

template <typename T>
class GradBuffer;

// Per-node gradients produced by Tape::backward.
template <typename T>
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<Tensor<T>> grads, std::vector<Shape> shapes)
      : grads_(std::move(grads)), shapes_(std::move(shapes)) {}

  // Gradient of the loss with respect to v; zeros when v does not reach the loss.
  Tensor<T> of(Var<T> v) const {
    const Tensor<T>& g = grads_.at(v.id);
    return g.empty() ? Tensor<T>(shapes_[v.id]) : g;
  }

  bool reached(Var<T> v) const { return !grads_.at(v.id).empty(); }

 private:
  std::vector<Tensor<T>> grads_;
  std::vector<Shape> shapes_;
};

// Ordered record of one forward computation. Entries are appended in
// evaluation order, so every input id is smaller than the id of its consumer
// and the reverse sweep in backward() is a valid topological order.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(const Tensor<T>& grad_out, GradBuffer<T>& grads)>;

  // With grad_enabled false the tape only evaluates: parameters behave like
  // constants and no backward closures are kept.
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value);
  Var<T> parameter(Tensor<T> value);

  // Appends an operation node. Throws NumericError if value is not finite.
  Var<T> record(OpKind op, std::vector<std::size_t> inputs, Tensor<T> value, BackwardFn backward);

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  bool any_requires_grad(const std::vector<std::size_t>& ids) const;
  OpKind op(std::size_t id) const { return nodes_.at(id).op; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }
  std::size_t size() const { return nodes_.size(); }
  bool grad_enabled() const { return grad_enabled_; }

  // Reverse sweep from a scalar loss. Every node is visited at most once.
  Gradients<T> backward(Var<T> loss) const;

 private:
  struct Node {
    OpKind op;
    std::vector<std::size_t> inputs;
    Tensor<T> value;
    bool requires_grad;
    BackwardFn backward;
  };

  bool grad_enabled_;
  std::deque<Node> nodes_;  // stable references across appends
};

// Gradient accumulation slots handed to backward closures.
template <typename T>
class GradBuffer {
 public:
  GradBuffer(const Tape<T>& tape, std::vector<Tensor<T>>& grads) : tape_(tape), grads_(grads) {}

  bool wants(std::size_t id) const { return tape_.requires_grad(id); }

  // Zero-initialized on first use; callers add into it.
  Tensor<T>& slot(std::size_t id) {
    Tensor<T>& g = grads_[id];
    if (g.empty()) {
      g = Tensor<T>(tape_.value(id).shape());
    }
    return g;
  }

  void accumulate(std::size_t id, const Tensor<T>& delta) {
    if (!wants(id)) {
      return;
    }
    Tensor<T>& g = grads_[id];
    if (g.empty()) {
      g = delta;
      return;
    }
    auto dst = g.data();
    auto src = delta.data();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      dst[i] += src[i];
    }
  }

  const Tape<T>& tape() const { return tape_; }

 private:
  const Tape<T>& tape_;
  std::vector<Tensor<T>>& grads_;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace refix::grad
