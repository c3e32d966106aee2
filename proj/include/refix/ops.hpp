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

#include <cstddef>
#include <span>
#include <vector>

#include "refix/tape.hpp"
#include "refix/tensor.hpp"

namespace refix::grad {

// Recorded operations. Each appends one node to the tape of its operands and
// registers the matching reverse-mode rule. Binary elementwise operations
// broadcast with right-aligned extents, size-1 axes stretching.

template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> sub(Var<T> a, Var<T> b);
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);
template <typename T>
Var<T> scale(Var<T> a, double factor);
template <typename T>
Var<T> div_scalar(Var<T> a, double divisor);
template <typename T>
Var<T> relu(Var<T> a);

// Scalar sum of all elements, correctly rounded (independent of element order).
template <typename T>
Var<T> sum(Var<T> a);
template <typename T>
Var<T> mean(Var<T> a);
// Sum over one axis; the axis is removed from the shape.
template <typename T>
Var<T> sum_axis(Var<T> a, std::size_t axis);

// [m,k] x [k,n] -> [m,n]
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b);

// Cross-correlation of [N,C,H,W] with [F,C,kh,kw].
template <typename T>
Var<T> conv2d(Var<T> input, Var<T> kernel, std::size_t stride = 1, std::size_t padding = 0);

// 2x2 max pooling with stride 2 over the last two axes of [N,C,H,W].
template <typename T>
Var<T> max_pool2(Var<T> input);

template <typename T>
Var<T> log_softmax(Var<T> z, std::size_t axis);

// out[n] = a[n, index[n]] for a of shape [N,K].
template <typename T>
Var<T> gather(Var<T> a, std::span<const std::size_t> index);

template <typename T>
Var<T> reshape(Var<T> a, Shape shape);

// Forwards the value unchanged; no gradient flows back through it.
template <typename T>
Var<T> stop_gradient(Var<T> a);

template <typename T>
Var<T> operator+(Var<T> a, Var<T> b) {
  return add(a, b);
}
template <typename T>
Var<T> operator-(Var<T> a, Var<T> b) {
  return sub(a, b);
}
template <typename T>
Var<T> operator*(Var<T> a, Var<T> b) {
  return mul(a, b);
}

// Plain tensor kernels shared by the recorded ops and by evaluation code.
namespace kernels {

Shape broadcast_shape(const Shape& a, const Shape& b);

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride,
                 std::size_t padding);

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& z, std::size_t axis);

// Row-wise softmax over the last axis of z / temperature, max-subtracted.
template <typename T>
Tensor<T> softmax(const Tensor<T>& z, double temperature = 1.0);

}  // namespace kernels

}  // namespace refix::grad
