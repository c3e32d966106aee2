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

// Central finite-difference oracle used to check reverse-mode gradients. It
// only evaluates forward passes, so it stays independent of every backward
// rule it is used to check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "refix/ops.hpp"
#include "refix/rng.hpp"

namespace refix::testing {

using BuildFn = std::function<grad::Var<double>(grad::Tape<double>&, const std::vector<grad::Var<double>>&)>;

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

// Relative error with a small absolute floor so that gradients that are zero
// up to roundoff do not divide by zero.
inline double rel_error(double analytic, double numeric, double floor = 1e-6) {
  return std::fabs(analytic - numeric) / std::max({std::fabs(analytic), std::fabs(numeric), floor});
}

inline double evaluate(const BuildFn& build, const std::vector<Tensor<double>>& inputs) {
  grad::Tape<double> tape(false);
  std::vector<grad::Var<double>> vars;
  for (const auto& t : inputs) vars.push_back(tape.parameter(t));
  return build(tape, vars).value().item();
}

// Compares analytic gradients of build() against central differences for
// every element of every input. max_elements > 0 subsamples elements with a
// fixed stride to bound the cost on larger models.
inline GradCheck check_gradients(const BuildFn& build, const std::vector<Tensor<double>>& inputs,
                                 double step = 1e-5, std::size_t max_elements = 0) {
  grad::Tape<double> tape;
  std::vector<grad::Var<double>> vars;
  for (const auto& t : inputs) vars.push_back(tape.parameter(t));
  const grad::Var<double> loss = build(tape, vars);
  const grad::Gradients<double> grads = tape.backward(loss);

  GradCheck result;
  std::vector<Tensor<double>> probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor<double> analytic = grads.of(vars[k]);
    const std::size_t n = inputs[k].size();
    const std::size_t stride = max_elements > 0 && n > max_elements ? n / max_elements : 1;
    for (std::size_t i = 0; i < n; i += stride) {
      const double saved = probe[k][i];
      probe[k][i] = saved + step;
      const double up = evaluate(build, probe);
      probe[k][i] = saved - step;
      const double down = evaluate(build, probe);
      probe[k][i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      result.max_rel_error = std::max(result.max_rel_error, rel_error(analytic[i], numeric));
      ++result.checked;
    }
  }
  return result;
}

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Scalar projection sum(out * weights) with fixed random weights, so that
// every output element influences the checked loss differently.
inline grad::Var<double> project(grad::Var<double> out, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> w(out.shape());
  for (double& v : w.data()) v = rng.uniform(-1.0, 1.0);
  return grad::sum(grad::mul(out, out.tape->constant(w)));
}

}  // namespace refix::testing
