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

#include "fd_oracle.hpp"
#include "refix/ops.hpp"

using refix::DimensionError;
using refix::Rng;
using refix::Shape;
using refix::Tensor;
using refix::grad::Tape;
using refix::grad::Var;
using refix::testing::BuildFn;
using refix::testing::check_gradients;
using refix::testing::project;
using refix::testing::random_tensor;
namespace g = refix::grad;

TEST_CASE("matmul hand cases") {
  Tape<double> tape(false);
  auto eye = tape.constant(Tensor<double>({2, 2}, {1, 0, 0, 1}));
  auto a = tape.constant(Tensor<double>({2, 2}, {1, 2, 3, 4}));
  CHECK(g::matmul(eye, a).value() == a.value());

  auto ones = tape.constant(Tensor<double>({2, 1}, {1, 1}));
  CHECK(g::matmul(a, ones).value() == Tensor<double>({2, 1}, {3, 7}));
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>({2, 3}));
  auto b = tape.constant(Tensor<double>({2, 3}));
  try {
    g::matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3] x [2x3]") != std::string::npos);
  }
}

TEST_CASE("gradient of sum(A*B) wrt A is the broadcast row sums of B") {
  Rng rng(11);
  const Tensor<double> a = random_tensor({3, 4}, rng);
  const Tensor<double> b = random_tensor({4, 5}, rng);
  Tape<double> tape;
  auto va = tape.parameter(a);
  auto vb = tape.constant(b);
  const auto grads = tape.backward(g::sum(g::matmul(va, vb)));
  const Tensor<double> ga = grads.of(va);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t p = 0; p < 4; ++p) {
      double row = 0;
      for (std::size_t j = 0; j < 5; ++j) row += b[p * 5 + j];
      CHECK(ga[i * 4 + p] == doctest::Approx(row).epsilon(1e-12));
    }
  }
  const BuildFn build = [](Tape<double>&, const std::vector<Var<double>>& v) {
    return g::sum(g::matmul(v[0], v[1]));
  };
  CHECK(check_gradients(build, {a, b}).max_rel_error < 1e-4);
}

TEST_CASE("conv2d hand cases") {
  Tape<double> tape(false);
  SUBCASE("1x1 unit kernel sums channels") {
    Rng rng(3);
    const Tensor<double> x = random_tensor({2, 3, 4, 4}, rng);
    auto out = g::conv2d(tape.constant(x), tape.constant(Tensor<double>({1, 3, 1, 1}, 1.0)), 1, 0);
    REQUIRE(out.shape() == Shape{2, 1, 4, 4});
    for (std::size_t n = 0; n < 2; ++n) {
      for (std::size_t i = 0; i < 16; ++i) {
        const double expected = x[(n * 3 + 0) * 16 + i] + x[(n * 3 + 1) * 16 + i] + x[(n * 3 + 2) * 16 + i];
        CHECK(out.value()[n * 16 + i] == doctest::Approx(expected).epsilon(1e-15));
      }
    }
  }
  SUBCASE("3x3 all-ones on all-ones input") {
    const std::size_t channels = 4;
    auto out = g::conv2d(tape.constant(Tensor<double>({1, channels, 3, 3}, 1.0)),
                         tape.constant(Tensor<double>({1, channels, 3, 3}, 1.0)), 1, 0);
    REQUIRE(out.shape() == Shape{1, 1, 1, 1});
    CHECK(out.value()[0] == 9.0 * channels);
  }
  SUBCASE("output extent follows floor((H + 2p - k) / s) + 1") {
    auto out = g::conv2d(tape.constant(Tensor<double>({1, 1, 7, 6}, 1.0)),
                         tape.constant(Tensor<double>({2, 1, 3, 3}, 1.0)), 2, 1);
    CHECK(out.shape() == Shape{1, 2, 4, 3});
  }
  SUBCASE("kernel larger than padded input") {
    CHECK_THROWS_AS(g::conv2d(tape.constant(Tensor<double>({1, 1, 2, 2})),
                              tape.constant(Tensor<double>({1, 1, 3, 3})), 1, 0),
                    DimensionError);
  }
}

TEST_CASE("conv2d backward matches finite differences") {
  Rng rng(5);
  const BuildFn build = [](Tape<double>&, const std::vector<Var<double>>& v) {
    return project(g::conv2d(v[0], v[1], 1, 0), 99);
  };
  const auto check = check_gradients(build, {random_tensor({2, 1, 4, 4}, rng), random_tensor({1, 1, 2, 2}, rng)});
  CHECK(check.max_rel_error < 1e-4);
}

TEST_CASE("log_softmax hand cases") {
  Tape<double> tape(false);
  auto a = g::log_softmax(tape.constant(Tensor<double>({2}, {0, 0})), 0);
  CHECK(a.value()[0] == doctest::Approx(-std::log(2.0)).epsilon(1e-15));
  CHECK(a.value()[1] == doctest::Approx(-std::log(2.0)).epsilon(1e-15));

  auto b = g::log_softmax(tape.constant(Tensor<double>({2}, {0, std::log(4.0)})), 0);
  CHECK(b.value()[0] == doctest::Approx(-std::log(5.0)).epsilon(1e-14));
  CHECK(b.value()[1] == doctest::Approx(std::log(4.0) - std::log(5.0)).epsilon(1e-14));

  // Shift by a power of two keeps every intermediate exact.
  auto c = g::log_softmax(tape.constant(Tensor<double>({3}, {0.25, -1.5, 3.0})), 0);
  auto d = g::log_softmax(tape.constant(Tensor<double>({3}, {8.25, 6.5, 11.0})), 0);
  CHECK(c.value() == d.value());
}

TEST_CASE("softmax rows are probability vectors") {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor<float> z = random_tensor({4, 7}, rng, -20, 20).cast<float>();
    const Tensor<float> p = g::kernels::softmax(z);
    for (std::size_t r = 0; r < 4; ++r) {
      double total = 0;
      for (std::size_t k = 0; k < 7; ++k) {
        CHECK(p[r * 7 + k] >= 0.0f);
        total += p[r * 7 + k];
      }
      CHECK(std::fabs(total - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("backward basics") {
  SUBCASE("sum gives ones") {
    Tape<double> tape;
    auto theta = tape.parameter(Tensor<double>({3}, {0.5, -2, 7}));
    CHECK(tape.backward(g::sum(theta)).of(theta) == Tensor<double>({3}, 1.0));
  }
  SUBCASE("sum of squares") {
    Tape<double> tape;
    auto theta = tape.parameter(Tensor<double>({2}, {1, 2}));
    CHECK(tape.backward(g::sum(theta * theta)).of(theta) == Tensor<double>({2}, {2, 4}));
  }
  SUBCASE("non-scalar loss is a contract error") {
    Tape<double> tape;
    auto theta = tape.parameter(Tensor<double>({2}, {1, 2}));
    CHECK_THROWS_AS(tape.backward(theta * theta), refix::ContractError);
  }
  SUBCASE("unreachable parameters get zeros") {
    Tape<double> tape;
    auto used = tape.parameter(Tensor<double>({2}, {1, 2}));
    auto unused = tape.parameter(Tensor<double>({3}, {1, 2, 3}));
    const auto grads = tape.backward(g::sum(used));
    CHECK_FALSE(grads.reached(unused));
    CHECK(grads.of(unused) == Tensor<double>({3}));
  }
}

TEST_CASE("tape records in topological order") {
  Tape<double> tape;
  auto a = tape.parameter(Tensor<double>({2}, {1, 2}));
  auto b = tape.constant(Tensor<double>({2}, {3, 4}));
  g::sum(g::relu(a * b + a));
  for (std::size_t i = 0; i < tape.size(); ++i) {
    for (std::size_t in : tape.inputs(i)) CHECK(in < i);
  }
}

TEST_CASE("stop_gradient forwards exactly and blocks gradient") {
  Tape<double> tape;
  auto a = tape.parameter(Tensor<double>({3}, {0.1, -0.2, 0.3}));
  auto s = g::stop_gradient(a);
  CHECK(s.value() == a.value());
  const auto grads = tape.backward(g::sum(s * a));
  // d/da [sg(a) * a] = sg(a)
  CHECK(grads.of(a) == a.value());
}

TEST_CASE("non-finite forward values raise") {
  Tape<double> tape;
  auto a = tape.parameter(Tensor<double>({1}, {1e308}));
  CHECK_THROWS_AS(g::scale(a, 10.0), refix::NumericError);
}

TEST_CASE("two-layer MLP cross-entropy matches finite differences") {
  Rng rng(23);
  const std::size_t n = 5;
  const std::size_t k = 3;
  std::vector<std::size_t> labels(n);
  for (auto& y : labels) y = rng.below(k);
  const Tensor<double> x = random_tensor({n, 6}, rng);
  const BuildFn build = [&](Tape<double>& tape, const std::vector<Var<double>>& v) {
    auto h = g::relu(g::matmul(tape.constant(x), v[0]) + v[1]);
    auto logits = g::matmul(h, v[2]) + v[3];
    return g::scale(g::mean(g::gather(g::log_softmax(logits, 1), labels)), -1.0);
  };
  const auto check = check_gradients(
      build, {random_tensor({6, 8}, rng), random_tensor({8}, rng), random_tensor({8, k}, rng), random_tensor({k}, rng)});
  CHECK(check.max_rel_error < 1e-4);
}

TEST_CASE("every differentiable op matches finite differences on random instances") {
  struct Case {
    const char* name;
    std::vector<Shape> shapes;
    std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)> op;
  };
  const std::vector<std::size_t> picks{2, 0, 1, 1};
  const std::vector<Case> cases{
      {"add", {{3, 4}, {3, 4}}, [](auto&, auto& v) { return g::add(v[0], v[1]); }},
      {"add_broadcast", {{3, 4}, {4}}, [](auto&, auto& v) { return g::add(v[0], v[1]); }},
      {"sub_broadcast", {{2, 3, 2, 2}, {1, 3, 1, 1}}, [](auto&, auto& v) { return g::sub(v[0], v[1]); }},
      {"mul_broadcast", {{3, 1}, {1, 4}}, [](auto&, auto& v) { return g::mul(v[0], v[1]); }},
      {"scale", {{5}}, [](auto&, auto& v) { return g::scale(v[0], -1.7); }},
      {"div_scalar", {{5}}, [](auto&, auto& v) { return g::div_scalar(v[0], 3.0); }},
      {"relu", {{4, 5}}, [](auto&, auto& v) { return g::relu(v[0]); }},
      {"sum", {{4, 5}}, [](auto&, auto& v) { return g::sum(v[0]); }},
      {"mean", {{4, 5}}, [](auto&, auto& v) { return g::mean(v[0]); }},
      {"sum_axis0", {{3, 4, 2}}, [](auto&, auto& v) { return g::sum_axis(v[0], 0); }},
      {"sum_axis1", {{3, 4, 2}}, [](auto&, auto& v) { return g::sum_axis(v[0], 1); }},
      {"matmul", {{3, 4}, {4, 2}}, [](auto&, auto& v) { return g::matmul(v[0], v[1]); }},
      {"conv2d_s2p1", {{2, 2, 5, 5}, {3, 2, 3, 3}}, [](auto&, auto& v) { return g::conv2d(v[0], v[1], 2, 1); }},
      {"max_pool2", {{2, 2, 4, 5}}, [](auto&, auto& v) { return g::max_pool2(v[0]); }},
      {"log_softmax1", {{3, 5}}, [](auto&, auto& v) { return g::log_softmax(v[0], 1); }},
      {"log_softmax0", {{3, 5}}, [](auto&, auto& v) { return g::log_softmax(v[0], 0); }},
      {"gather", {{4, 3}}, [&](auto&, auto& v) { return g::gather(v[0], picks); }},
      {"reshape", {{2, 6}}, [](auto&, auto& v) { return g::reshape(v[0], Shape{3, 4}); }},
  };
  Rng rng(2024);
  for (const Case& c : cases) {
    CAPTURE(c.name);
    for (int instance = 0; instance < 20; ++instance) {
      std::vector<Tensor<double>> inputs;
      for (const Shape& s : c.shapes) inputs.push_back(random_tensor(s, rng));
      const std::uint64_t proj_seed = rng();
      const BuildFn build = [&](Tape<double>& tape, const std::vector<Var<double>>& v) {
        Var<double> out = c.op(tape, v);
        return out.value().size() == 1 ? out : project(out, proj_seed);
      };
      CHECK(check_gradients(build, inputs).max_rel_error < 1e-4);
    }
  }
}

TEST_CASE("tape replay is bit-identical") {
  Rng rng(8);
  const Tensor<float> x = random_tensor({3, 1, 6, 6}, rng).cast<float>();
  const Tensor<float> k = random_tensor({2, 1, 3, 3}, rng).cast<float>();
  auto run = [&] {
    Tape<float> tape;
    auto vk = tape.parameter(k);
    auto out = g::sum(g::max_pool2(g::relu(g::conv2d(tape.constant(x), vk, 1, 1))));
    return std::make_pair(out.value(), tape.backward(out).of(vk));
  };
  const auto first = run();
  const auto second = run();
  CHECK(first.first == second.first);
  CHECK(first.second == second.second);
}
