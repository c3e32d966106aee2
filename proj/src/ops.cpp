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

#include "refix/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "refix/exact_sum.hpp"

namespace refix::grad {

namespace {

void check_same_tape(const void* a, const void* b, const char* op) {
  if (a != b) {
    throw ContractError(std::string(op) + ": operands recorded on different tapes");
  }
}

// Strides of `in` expressed over the index space of the broadcast shape `out`;
// broadcast axes get stride 0.
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  const std::size_t offset = out.size() - in.size();
  for (std::size_t j = in.size(); j-- > 0;) {
    strides[j + offset] = in[j] == 1 ? 0 : stride;
    stride *= in[j];
  }
  return strides;
}

// Calls f(out_index, a_index, b_index) for every element of `out`, in
// row-major order.
template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t rank = out.size();
  if (rank == 0) {
    f(0, 0, 0);
    return;
  }
  const std::size_t inner = out[rank - 1];
  const std::size_t total = shape_size(out);
  if (inner == 0 || total == 0) {
    return;
  }
  const std::size_t outer = total / inner;
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0;
  std::size_t ob = 0;
  std::size_t o = 0;
  const std::size_t ia = sa[rank - 1];
  const std::size_t ib = sb[rank - 1];
  for (std::size_t it = 0; it < outer; ++it) {
    for (std::size_t k = 0; k < inner; ++k) {
      f(o + k, oa + k * ia, ob + k * ib);
    }
    o += inner;
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out[d]) {
        break;
      }
      oa -= sa[d] * out[d];
      ob -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

enum class Binary { kAdd, kSub, kMul };

template <typename T>
Var<T> binary(Var<T> a, Var<T> b, Binary kind) {
  check_same_tape(a.tape, b.tape, "binary op");
  Tape<T>& tape = *a.tape;
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  const Shape out_shape = kernels::broadcast_shape(av.shape(), bv.shape());
  Tensor<T> out(out_shape);
  auto o = out.data();
  auto x = av.data();
  auto y = bv.data();
  const bool same = av.shape() == bv.shape();
  const auto sa = broadcast_strides(av.shape(), out_shape);
  const auto sb = broadcast_strides(bv.shape(), out_shape);
  switch (kind) {
    case Binary::kAdd:
      if (same) {
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
      } else {
        for_each_broadcast(out_shape, sa, sb,
                           [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = x[ia] + y[ib]; });
      }
      break;
    case Binary::kSub:
      if (same) {
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
      } else {
        for_each_broadcast(out_shape, sa, sb,
                           [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = x[ia] - y[ib]; });
      }
      break;
    case Binary::kMul:
      if (same) {
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
      } else {
        for_each_broadcast(out_shape, sa, sb,
                           [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = x[ia] * y[ib]; });
      }
      break;
  }
  const std::size_t ida = a.id;
  const std::size_t idb = b.id;
  const OpKind op = kind == Binary::kAdd ? OpKind::kAdd : kind == Binary::kSub ? OpKind::kSub : OpKind::kMul;
  return tape.record(
      op, {ida, idb}, std::move(out),
      [ida, idb, kind, out_shape, sa, sb](const Tensor<T>& g, GradBuffer<T>& grads) {
        const auto gd = g.data();
        const bool want_a = grads.wants(ida);
        const bool want_b = grads.wants(idb);
        if (kind == Binary::kMul) {
          const auto x = grads.tape().value(ida).data();
          const auto y = grads.tape().value(idb).data();
          if (want_a) {
            auto ga = grads.slot(ida).data();
            for_each_broadcast(out_shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
              ga[ia] += gd[i] * y[ib];
            });
          }
          if (want_b) {
            auto gb = grads.slot(idb).data();
            for_each_broadcast(out_shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
              gb[ib] += gd[i] * x[ia];
            });
          }
          return;
        }
        const T sign_b = kind == Binary::kSub ? T{-1} : T{1};
        if (want_a) {
          auto ga = grads.slot(ida).data();
          for_each_broadcast(out_shape, sa, sb,
                             [&](std::size_t i, std::size_t ia, std::size_t) { ga[ia] += gd[i]; });
        }
        if (want_b) {
          auto gb = grads.slot(idb).data();
          for_each_broadcast(out_shape, sa, sb,
                             [&](std::size_t i, std::size_t, std::size_t ib) { gb[ib] += sign_b * gd[i]; });
        }
      });
}

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T{0}) {
        continue;
      }
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        crow[j] += av * brow[j];
      }
    }
  }
}

// C[m,n] += A^T * B with A stored [k,m], B stored [k,n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      if (av == T{0}) {
        continue;
      }
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        crow[j] += av * brow[j];
      }
    }
  }
}

template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      dst[c * rows + r] = src[r * cols + c];
    }
  }
}

// C[m,n] += A[m,k] * B^T with B stored [n,k]
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             std::vector<T>& scratch) {
  scratch.resize(n * k);
  transpose(n, k, b, scratch.data());
  gemm_nn(m, n, k, a, scratch.data(), c);
}

struct ConvGeometry {
  std::size_t n, c, h, w, f, kh, kw, stride, pad, oh, ow;

  std::size_t patch() const { return c * kh * kw; }
  std::size_t positions() const { return oh * ow; }
};

ConvGeometry conv_geometry(const Shape& in, const Shape& k, std::size_t stride, std::size_t pad) {
  if (in.size() != 4 || k.size() != 4) {
    throw DimensionError("conv2d expects [N,C,H,W] input and [F,C,kh,kw] kernel, got " +
                         shape_string(in) + " and " + shape_string(k));
  }
  if (in[1] != k[1]) {
    throw DimensionError("conv2d channel mismatch: input " + shape_string(in) + ", kernel " +
                         shape_string(k));
  }
  if (stride == 0) {
    throw ContractError("conv2d stride must be positive");
  }
  const std::size_t ph = in[2] + 2 * pad;
  const std::size_t pw = in[3] + 2 * pad;
  if (k[2] > ph || k[3] > pw) {
    throw DimensionError("conv2d kernel " + shape_string(k) + " larger than padded input " +
                         shape_string(in) + " (padding " + std::to_string(pad) + ")");
  }
  return ConvGeometry{in[0], in[1], in[2], in[3], k[0], k[2], k[3], stride, pad,
                      (ph - k[2]) / stride + 1, (pw - k[3]) / stride + 1};
}

// col[(c*kh + i)*kw + j, oy*ow + ox] = x[c, oy*s + i - pad, ox*s + j - pad]
template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* col) {
  const std::size_t positions = g.positions();
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* dst = col + ((c * g.kh + i) * g.kw + j) * positions;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.stride + i) -
                                   static_cast<std::ptrdiff_t>(g.pad);
          T* drow = dst + oy * g.ow;
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(drow, drow + g.ow, T{0});
            continue;
          }
          const T* srow = x + (c * g.h + static_cast<std::size_t>(y)) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(ox * g.stride + j) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            drow[ox] = (xx < 0 || xx >= static_cast<std::ptrdiff_t>(g.w))
                           ? T{0}
                           : srow[static_cast<std::size_t>(xx)];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const ConvGeometry& g, const T* col, T* dx) {
  const std::size_t positions = g.positions();
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* src = col + ((c * g.kh + i) * g.kw + j) * positions;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.stride + i) -
                                   static_cast<std::ptrdiff_t>(g.pad);
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.h)) {
            continue;
          }
          T* drow = dx + (c * g.h + static_cast<std::size_t>(y)) * g.w;
          const T* srow = src + oy * g.ow;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(ox * g.stride + j) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            if (xx >= 0 && xx < static_cast<std::ptrdiff_t>(g.w)) {
              drow[static_cast<std::size_t>(xx)] += srow[ox];
            }
          }
        }
      }
    }
  }
}

struct AxisSplit {
  std::size_t outer, extent, inner;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                         shape_string(shape));
  }
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

namespace kernels {

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError("cannot broadcast " + shape_string(a) + " with " + shape_string(b));
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul shape mismatch: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  const std::size_t m = a.dim(0);
  const std::size_t k = a.dim(1);
  const std::size_t n = b.dim(1);
  Tensor<T> out(Shape{m, n});
  gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data().data());
  return out;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride,
                 std::size_t padding) {
  const ConvGeometry g = conv_geometry(input.shape(), kernel.shape(), stride, padding);
  Tensor<T> out(Shape{g.n, g.f, g.oh, g.ow});
  std::vector<T> col(g.patch() * g.positions());
  const T* x = input.data().data();
  const T* w = kernel.data().data();
  T* o = out.data().data();
  for (std::size_t s = 0; s < g.n; ++s) {
    im2col(g, x + s * g.c * g.h * g.w, col.data());
    gemm_nn(g.f, g.positions(), g.patch(), w, col.data(), o + s * g.f * g.positions());
  }
  return out;
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& z, std::size_t axis) {
  const AxisSplit s = split_axis(z.shape(), axis, "log_softmax");
  if (s.extent == 0) {
    throw DimensionError("log_softmax over an empty axis");
  }
  Tensor<T> out(z.shape());
  const auto x = z.data();
  auto o = out.data();
  for (std::size_t a = 0; a < s.outer; ++a) {
    for (std::size_t b = 0; b < s.inner; ++b) {
      const std::size_t base = a * s.extent * s.inner + b;
      T m = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < s.extent; ++k) m = std::max(m, x[base + k * s.inner]);
      T total = 0;
      for (std::size_t k = 0; k < s.extent; ++k) total += std::exp(x[base + k * s.inner] - m);
      const T lse = std::log(total);
      for (std::size_t k = 0; k < s.extent; ++k) {
        o[base + k * s.inner] = (x[base + k * s.inner] - m) - lse;
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& z, double temperature) {
  if (!(temperature > 0.0)) {
    throw ContractError("softmax temperature must be positive, got " + std::to_string(temperature));
  }
  if (z.rank() == 0) {
    throw DimensionError("softmax of a scalar");
  }
  const std::size_t k = z.shape().back();
  if (k == 0) {
    throw DimensionError("softmax over an empty axis");
  }
  const std::size_t rows = z.size() / k;
  Tensor<T> out(z.shape());
  const auto x = z.data();
  auto o = out.data();
  const T t = static_cast<T>(temperature);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = x.data() + r * k;
    T* orow = o.data() + r * k;
    T m = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < k; ++j) m = std::max(m, row[j] / t);
    T total = 0;
    for (std::size_t j = 0; j < k; ++j) {
      orow[j] = std::exp(row[j] / t - m);
      total += orow[j];
    }
    for (std::size_t j = 0; j < k; ++j) orow[j] /= total;
  }
  return out;
}

}  // namespace kernels

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return binary(a, b, Binary::kAdd);
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return binary(a, b, Binary::kSub);
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  return binary(a, b, Binary::kMul);
}

template <typename T>
Var<T> scale(Var<T> a, double factor) {
  Tensor<T> out = a.value();
  const T f = static_cast<T>(factor);
  for (T& v : out.data()) v *= f;
  const std::size_t ida = a.id;
  return a.tape->record(OpKind::kScale, {ida}, std::move(out),
                        [ida, f](const Tensor<T>& g, GradBuffer<T>& grads) {
                          auto ga = grads.slot(ida).data();
                          const auto gd = g.data();
                          for (std::size_t i = 0; i < gd.size(); ++i) ga[i] += f * gd[i];
                        });
}

template <typename T>
Var<T> div_scalar(Var<T> a, double divisor) {
  if (divisor == 0.0) {
    throw ContractError("div_scalar by zero");
  }
  Tensor<T> out = a.value();
  const T d = static_cast<T>(divisor);
  for (T& v : out.data()) v /= d;
  const std::size_t ida = a.id;
  return a.tape->record(OpKind::kDivScalar, {ida}, std::move(out),
                        [ida, d](const Tensor<T>& g, GradBuffer<T>& grads) {
                          auto ga = grads.slot(ida).data();
                          const auto gd = g.data();
                          for (std::size_t i = 0; i < gd.size(); ++i) ga[i] += gd[i] / d;
                        });
}

template <typename T>
Var<T> relu(Var<T> a) {
  Tensor<T> out = a.value();
  for (T& v : out.data()) v = v > T{0} ? v : T{0};
  const std::size_t ida = a.id;
  return a.tape->record(OpKind::kRelu, {ida}, std::move(out),
                        [ida](const Tensor<T>& g, GradBuffer<T>& grads) {
                          const auto x = grads.tape().value(ida).data();
                          auto ga = grads.slot(ida).data();
                          const auto gd = g.data();
                          for (std::size_t i = 0; i < gd.size(); ++i) {
                            if (x[i] > T{0}) ga[i] += gd[i];
                          }
                        });
}

template <typename T>
Var<T> sum(Var<T> a) {
  ExactSum acc;
  for (T v : a.value().data()) acc.add(static_cast<double>(v));
  const std::size_t ida = a.id;
  return a.tape->record(OpKind::kSum, {ida}, Tensor<T>::scalar(static_cast<T>(acc.value())),
                        [ida](const Tensor<T>& g, GradBuffer<T>& grads) {
                          const T gv = g[0];
                          for (T& v : grads.slot(ida).data()) v += gv;
                        });
}

template <typename T>
Var<T> mean(Var<T> a) {
  const std::size_t n = a.value().size();
  if (n == 0) {
    throw DimensionError("mean of an empty tensor");
  }
  return div_scalar(sum(a), static_cast<double>(n));
}

template <typename T>
Var<T> sum_axis(Var<T> a, std::size_t axis) {
  const Shape& in = a.shape();
  const AxisSplit s = split_axis(in, axis, "sum_axis");
  Shape out_shape;
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (i != axis) out_shape.push_back(in[i]);
  }
  Tensor<T> out(out_shape);
  const auto x = a.value().data();
  auto o = out.data();
  for (std::size_t p = 0; p < s.outer; ++p) {
    for (std::size_t k = 0; k < s.extent; ++k) {
      const T* src = x.data() + (p * s.extent + k) * s.inner;
      T* dst = o.data() + p * s.inner;
      for (std::size_t q = 0; q < s.inner; ++q) dst[q] += src[q];
    }
  }
  const std::size_t ida = a.id;
  return a.tape->record(OpKind::kSumAxis, {ida}, std::move(out),
                        [ida, s](const Tensor<T>& g, GradBuffer<T>& grads) {
                          auto ga = grads.slot(ida).data();
                          const auto gd = g.data();
                          for (std::size_t p = 0; p < s.outer; ++p) {
                            for (std::size_t k = 0; k < s.extent; ++k) {
                              T* dst = ga.data() + (p * s.extent + k) * s.inner;
                              const T* src = gd.data() + p * s.inner;
                              for (std::size_t q = 0; q < s.inner; ++q) dst[q] += src[q];
                            }
                          }
                        });
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  check_same_tape(a.tape, b.tape, "matmul");
  Tensor<T> out = kernels::matmul(a.value(), b.value());
  const std::size_t ida = a.id;
  const std::size_t idb = b.id;
  return a.tape->record(
      OpKind::kMatmul, {ida, idb}, std::move(out), [ida, idb](const Tensor<T>& g, GradBuffer<T>& grads) {
        const Tensor<T>& av = grads.tape().value(ida);
        const Tensor<T>& bv = grads.tape().value(idb);
        const std::size_t m = av.dim(0);
        const std::size_t k = av.dim(1);
        const std::size_t n = bv.dim(1);
        if (grads.wants(ida)) {
          std::vector<T> scratch;
          gemm_nt(m, k, n, g.data().data(), bv.data().data(), grads.slot(ida).data().data(), scratch);
        }
        if (grads.wants(idb)) {
          gemm_tn(k, n, m, av.data().data(), g.data().data(), grads.slot(idb).data().data());
        }
      });
}

template <typename T>
Var<T> conv2d(Var<T> input, Var<T> kernel, std::size_t stride, std::size_t padding) {
  check_same_tape(input.tape, kernel.tape, "conv2d");
  Tensor<T> out = kernels::conv2d(input.value(), kernel.value(), stride, padding);
  const ConvGeometry geo = conv_geometry(input.shape(), kernel.shape(), stride, padding);
  const std::size_t idx = input.id;
  const std::size_t idk = kernel.id;
  return input.tape->record(
      OpKind::kConv2d, {idx, idk}, std::move(out),
      [idx, idk, geo](const Tensor<T>& g, GradBuffer<T>& grads) {
        const bool want_x = grads.wants(idx);
        const bool want_k = grads.wants(idk);
        const T* x = grads.tape().value(idx).data().data();
        const T* w = grads.tape().value(idk).data().data();
        const T* gd = g.data().data();
        const std::size_t patch = geo.patch();
        const std::size_t positions = geo.positions();
        std::vector<T> col(patch * positions);
        std::vector<T> scratch;
        T* gk = want_k ? grads.slot(idk).data().data() : nullptr;
        T* gx = want_x ? grads.slot(idx).data().data() : nullptr;
        const std::size_t in_stride = geo.c * geo.h * geo.w;
        const std::size_t out_stride = geo.f * positions;
        for (std::size_t s = 0; s < geo.n; ++s) {
          const T* gs = gd + s * out_stride;
          if (want_k) {
            im2col(geo, x + s * in_stride, col.data());
            gemm_nt(geo.f, patch, positions, gs, col.data(), gk, scratch);
          }
          if (want_x) {
            std::fill(col.begin(), col.end(), T{0});
            gemm_tn(patch, positions, geo.f, w, gs, col.data());
            col2im_add(geo, col.data(), gx + s * in_stride);
          }
        }
      });
}

template <typename T>
Var<T> max_pool2(Var<T> input) {
  const Shape& in = input.shape();
  if (in.size() != 4 || in[2] < 2 || in[3] < 2) {
    throw DimensionError("max_pool2 expects [N,C,H,W] with H,W >= 2, got " + shape_string(in));
  }
  const std::size_t planes = in[0] * in[1];
  const std::size_t h = in[2];
  const std::size_t w = in[3];
  const std::size_t oh = h / 2;
  const std::size_t ow = w / 2;
  Tensor<T> out(Shape{in[0], in[1], oh, ow});
  std::vector<std::uint32_t> arg(out.size());
  const auto x = input.value().data();
  auto o = out.data();
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.data() + p * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (2 * oy) * w + 2 * ox;
        const std::size_t cand[3] = {best + 1, best + w, best + w + 1};
        for (std::size_t c : cand) {
          if (src[c] > src[best]) best = c;
        }
        const std::size_t oi = (p * oh + oy) * ow + ox;
        o[oi] = src[best];
        arg[oi] = static_cast<std::uint32_t>(p * h * w + best);
      }
    }
  }
  const std::size_t idx = input.id;
  return input.tape->record(OpKind::kMaxPool2, {idx}, std::move(out),
                            [idx, arg = std::move(arg)](const Tensor<T>& g, GradBuffer<T>& grads) {
                              auto gx = grads.slot(idx).data();
                              const auto gd = g.data();
                              for (std::size_t i = 0; i < gd.size(); ++i) gx[arg[i]] += gd[i];
                            });
}

template <typename T>
Var<T> log_softmax(Var<T> z, std::size_t axis) {
  Tensor<T> out = kernels::log_softmax(z.value(), axis);
  const AxisSplit s = split_axis(z.shape(), axis, "log_softmax");
  const std::size_t idz = z.id;
  // The reverse rule reads the op's own output, which lands at the next id.
  const std::size_t ido = z.tape->size();
  return z.tape->record(
      OpKind::kLogSoftmax, {idz}, std::move(out), [idz, ido, s](const Tensor<T>& g, GradBuffer<T>& grads) {
        const auto y = grads.tape().value(ido).data();
        const auto gd = g.data();
        auto gz = grads.slot(idz).data();
        for (std::size_t a = 0; a < s.outer; ++a) {
          for (std::size_t b = 0; b < s.inner; ++b) {
            const std::size_t base = a * s.extent * s.inner + b;
            T total = 0;
            for (std::size_t k = 0; k < s.extent; ++k) total += gd[base + k * s.inner];
            for (std::size_t k = 0; k < s.extent; ++k) {
              const std::size_t i = base + k * s.inner;
              gz[i] += gd[i] - std::exp(y[i]) * total;
            }
          }
        }
      });
}

template <typename T>
Var<T> gather(Var<T> a, std::span<const std::size_t> index) {
  const Shape& in = a.shape();
  if (in.size() != 2 || in[0] != index.size()) {
    throw DimensionError("gather expects [N,K] with N indices, got " + shape_string(in) + " and " +
                         std::to_string(index.size()) + " indices");
  }
  const std::size_t k = in[1];
  Tensor<T> out(Shape{in[0]});
  const auto x = a.value().data();
  std::vector<std::size_t> idx(index.begin(), index.end());
  for (std::size_t n = 0; n < idx.size(); ++n) {
    if (idx[n] >= k) {
      throw ContractError("gather index " + std::to_string(idx[n]) + " out of range for " +
                          std::to_string(k) + " classes");
    }
    out[n] = x[n * k + idx[n]];
  }
  const std::size_t ida = a.id;
  return a.tape->record(OpKind::kGather, {ida}, std::move(out),
                        [ida, k, idx = std::move(idx)](const Tensor<T>& g, GradBuffer<T>& grads) {
                          auto ga = grads.slot(ida).data();
                          for (std::size_t n = 0; n < idx.size(); ++n) ga[n * k + idx[n]] += g[n];
                        });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  const std::size_t ida = a.id;
  return a.tape->record(OpKind::kReshape, {ida}, std::move(out),
                        [ida](const Tensor<T>& g, GradBuffer<T>& grads) {
                          auto ga = grads.slot(ida).data();
                          const auto gd = g.data();
                          for (std::size_t i = 0; i < gd.size(); ++i) ga[i] += gd[i];
                        });
}

template <typename T>
Var<T> stop_gradient(Var<T> a) {
  return a.tape->record(OpKind::kStopGradient, {a.id}, a.value(), nullptr);
}

#define REFIX_INSTANTIATE_OPS(T)                                                          \
  template Var<T> add(Var<T>, Var<T>);                                                    \
  template Var<T> sub(Var<T>, Var<T>);                                                    \
  template Var<T> mul(Var<T>, Var<T>);                                                    \
  template Var<T> scale(Var<T>, double);                                                  \
  template Var<T> div_scalar(Var<T>, double);                                             \
  template Var<T> relu(Var<T>);                                                           \
  template Var<T> sum(Var<T>);                                                            \
  template Var<T> mean(Var<T>);                                                           \
  template Var<T> sum_axis(Var<T>, std::size_t);                                          \
  template Var<T> matmul(Var<T>, Var<T>);                                                 \
  template Var<T> conv2d(Var<T>, Var<T>, std::size_t, std::size_t);                       \
  template Var<T> max_pool2(Var<T>);                                                      \
  template Var<T> log_softmax(Var<T>, std::size_t);                                       \
  template Var<T> gather(Var<T>, std::span<const std::size_t>);                           \
  template Var<T> reshape(Var<T>, Shape);                                                 \
  template Var<T> stop_gradient(Var<T>);                                                  \
  template Tensor<T> kernels::matmul(const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> kernels::conv2d(const Tensor<T>&, const Tensor<T>&, std::size_t,     \
                                     std::size_t);                                        \
  template Tensor<T> kernels::log_softmax(const Tensor<T>&, std::size_t);                 \
  template Tensor<T> kernels::softmax(const Tensor<T>&, double);

REFIX_INSTANTIATE_OPS(float)
REFIX_INSTANTIATE_OPS(double)

}  // namespace refix::grad
