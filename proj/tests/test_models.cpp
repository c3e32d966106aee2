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

#include <doctest.h>

#include <cmath>

#include "refix/model.hpp"
#include "refix/rng.hpp"

using refix::ContractError;
using refix::Rng;
using refix::Shape;
using refix::Tensor;
namespace models = refix::models;

namespace {

models::ModelSpec tiny_mlp() {
  models::ModelSpec spec;
  spec.arch = models::Arch::kMlp;
  spec.widths = {2};
  spec.channels = 1;
  spec.height = 1;
  spec.width = 2;
  spec.classes = 2;
  spec.norm_mean = {0.0};
  spec.norm_std = {1.0};
  return spec;
}

Tensor<float> random_images(std::size_t n, const models::ModelSpec& spec, std::uint64_t seed) {
  Tensor<float> x(spec.input_shape(n));
  Rng rng = Rng::stream({seed});
  for (float& v : x.data()) v = static_cast<float>(rng.uniform(0.0, 1.0));
  return x;
}

}  // namespace

TEST_CASE("parameter layout of both architectures") {
  models::ModelSpec conv;
  const auto layout = models::parameter_layout(conv);
  REQUIRE(layout.size() == 6);
  CHECK(layout[0].second == Shape{16, 1, 3, 3});
  CHECK(layout[4].second == Shape{32 * 4 * 4, 10});

  models::ModelSpec mlp = tiny_mlp();
  mlp.widths = {8, 4};
  const auto ml = models::parameter_layout(mlp);
  REQUIRE(ml.size() == 6);
  CHECK(ml[0].first == "fc1.weight");
  CHECK(ml[2].second == Shape{8, 4});
  CHECK(ml[4].second == Shape{4, 2});
}

TEST_CASE("invalid specs are rejected") {
  models::ModelSpec spec;
  spec.widths = {16};
  CHECK_THROWS_AS(spec.validate(), ContractError);
  spec = models::ModelSpec{};
  spec.classes = 1;
  CHECK_THROWS_AS(spec.validate(), ContractError);
  spec = models::ModelSpec{};
  spec.norm_std = {0.0};
  CHECK_THROWS_AS(spec.validate(), ContractError);
  CHECK_THROWS(models::parse_arch("resnet"));
  CHECK(models::parse_arch(models::arch_name(models::Arch::kMlp)) == models::Arch::kMlp);
}

TEST_CASE("initialization is deterministic with zero biases and fan-in scale") {
  models::ModelSpec spec = tiny_mlp();
  spec.height = 16;
  spec.width = 16;
  spec.widths = {64};
  const auto a = models::init<float>(spec, 7);
  const auto b = models::init<float>(spec, 7);
  const auto c = models::init<float>(spec, 8);
  CHECK(a.params == b.params);
  CHECK(a.params != c.params);
  CHECK(a.ema == a.params);
  for (const auto& [name, t] : a.momentum) {
    for (float v : t.data()) CHECK(v == 0.0f);
  }
  for (const char* bias : {"fc1.bias", "out.bias"}) {
    for (float v : a.params.at(bias).data()) CHECK(v == 0.0f);
  }

  const Tensor<float>& w = a.params.at("fc1.weight");
  double sq = 0.0;
  for (float v : w.data()) sq += static_cast<double>(v) * v;
  const double std = std::sqrt(sq / static_cast<double>(w.size()));
  const double expected = models::init_bound(w.shape()) / std::sqrt(3.0);
  CHECK(std::abs(std - expected) <= 0.2 * expected);
  CHECK(models::init_bound(w.shape()) == doctest::Approx(std::sqrt(6.0 / 256.0)));
}

TEST_CASE("hand-computed MLP logits") {
  const models::ModelSpec spec = tiny_mlp();
  auto state = models::init<double>(spec, 0);
  // h = relu(x W1 + b1), z = h W2 + b2
  state.params.at("fc1.weight") = Tensor<double>(Shape{2, 2}, {1.0, -1.0, 2.0, 1.0});
  state.params.at("fc1.bias") = Tensor<double>(Shape{2}, {0.0, -5.0});
  state.params.at("out.weight") = Tensor<double>(Shape{2, 2}, {1.0, 0.5, -1.0, 2.0});
  state.params.at("out.bias") = Tensor<double>(Shape{2}, {0.25, 0.0});
  const Tensor<double> x(Shape{2, 1, 1, 2}, {1.0, 2.0, 3.0, -1.0});
  // row 0: pre = [5, -4] -> h = [5, 0] -> z = [5.25, 2.5]
  // row 1: pre = [1, -9] -> h = [1, 0] -> z = [1.25, 0.5]
  const Tensor<double> z = models::infer(spec, state.params, x);
  REQUIRE(z.shape() == Shape{2, 2});
  CHECK(z[0] == 5.25);
  CHECK(z[1] == 2.5);
  CHECK(z[2] == 1.25);
  CHECK(z[3] == 0.5);
}

TEST_CASE("normalization is applied before the first layer") {
  models::ModelSpec spec = tiny_mlp();
  spec.norm_mean = {0.5};
  spec.norm_std = {0.25};
  auto state = models::init<double>(spec, 0);
  state.params.at("fc1.weight") = Tensor<double>(Shape{2, 2}, {1.0, 0.0, 0.0, 1.0});
  state.params.at("out.weight") = Tensor<double>(Shape{2, 2}, {1.0, 0.0, 0.0, 1.0});
  const Tensor<double> x(Shape{1, 1, 1, 2}, {1.0, 0.75});
  const Tensor<double> z = models::infer(spec, state.params, x);
  CHECK(z[0] == 2.0);
  CHECK(z[1] == 1.0);
}

TEST_CASE("inference does not depend on the chunk size and matches the taped forward") {
  for (models::Arch arch : {models::Arch::kMlp, models::Arch::kSmallConv}) {
    models::ModelSpec spec;
    spec.arch = arch;
    spec.height = spec.width = 8;
    if (arch == models::Arch::kMlp) spec.widths = {16};
    const auto state = models::init<float>(spec, 3);
    const Tensor<float> x = random_images(13, spec, 11);
    const Tensor<float> full = models::infer(spec, state.params, x, 256);
    CHECK(models::infer(spec, state.params, x, 1) == full);
    CHECK(models::infer(spec, state.params, x, 5) == full);
    const auto taped = models::forward(state, x, false, true);
    CHECK(taped.logits == full);
    CHECK(taped.tape != nullptr);
    const auto ema = models::forward(state, x, true, false);
    CHECK(ema.tape == nullptr);
    CHECK(ema.logits == models::infer(spec, state.ema, x));
  }
}

TEST_CASE("input shape mismatch is reported") {
  const models::ModelSpec spec = tiny_mlp();
  const auto state = models::init<float>(spec, 0);
  CHECK_THROWS(models::infer(spec, state.params, Tensor<float>(Shape{1, 1, 2, 2})));
}

TEST_CASE("EMA update") {
  const models::ModelSpec spec = tiny_mlp();
  SUBCASE("one step at 0.999 from zero toward one") {
    auto state = models::init<double>(spec, 0);
    for (auto& [name, t] : state.ema) t = Tensor<double>(t.shape(), 0.0);
    for (auto& [name, t] : state.params) t = Tensor<double>(t.shape(), 1.0);
    models::ema_update(state, 0.999);
    for (const auto& [name, t] : state.ema) {
      for (double v : t.data()) CHECK(v == doctest::Approx(0.001).epsilon(1e-12));
    }
  }
  SUBCASE("dyadic momentum is exact for k <= 10") {
    auto state = models::init<float>(spec, 0);
    for (auto& [name, t] : state.ema) t = Tensor<float>(t.shape(), 0.0f);
    for (auto& [name, t] : state.params) t = Tensor<float>(t.shape(), 1.0f);
    for (int k = 1; k <= 10; ++k) {
      models::ema_update(state, 0.5);
      const float expected = 1.0f - std::ldexp(1.0f, -k);
      for (const auto& [name, t] : state.ema) {
        for (float v : t.data()) CHECK(v == expected);
      }
    }
  }
  SUBCASE("momentum 0 copies the parameters") {
    auto state = models::init<float>(spec, 4);
    for (auto& [name, t] : state.ema) t = Tensor<float>(t.shape(), 9.0f);
    models::ema_update(state, 0.0);
    CHECK(state.ema == state.params);
  }
  SUBCASE("out-of-range momentum") {
    auto state = models::init<float>(spec, 0);
    CHECK_THROWS_AS(models::ema_update(state, 1.0), ContractError);
    CHECK_THROWS_AS(models::ema_update(state, -0.1), ContractError);
  }
}

TEST_CASE("inconsistent state is detected") {
  auto state = models::init<float>(tiny_mlp(), 0);
  state.momentum.erase("out.bias");
  CHECK_THROWS_AS(models::check_consistent(state), ContractError);
}
