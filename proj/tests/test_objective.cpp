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
#include "refix/objective.hpp"

using refix::ContractError;
using refix::Rng;
using refix::Shape;
using refix::Tensor;
using refix::grad::Tape;
using refix::grad::Var;
using refix::testing::check_gradients;
using refix::testing::random_tensor;
namespace obj = refix::objective;

namespace {

obj::ThresholdPolicy fixed(double tau, std::size_t k) { return obj::ThresholdPolicy(obj::ThresholdMode::kFixed, tau, k, 0); }

// Logits whose softmax is exactly p (up to the log): z = ln p.
Tensor<double> logits_of(std::vector<double> probs, std::size_t k) {
  for (double& p : probs) p = std::log(p);
  const std::size_t rows = probs.size() / k;
  return Tensor<double>(Shape{rows, k}, std::move(probs));
}

obj::BranchDecision decision(obj::Branch branch, std::size_t predicted) {
  obj::BranchDecision d;
  d.branch = branch;
  d.predicted = predicted;
  return d;
}

// Independent reference for KL(p || q) with 0 ln 0 = 0.
double kl_reference(const std::vector<double>& p, const std::vector<double>& q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0) s += p[i] * (std::log(p[i]) - std::log(q[i]));
  }
  return s;
}

Tensor<double> concat_rows(const Tensor<double>& a, const Tensor<double>& b) {
  std::vector<double> v = a.vec();
  v.insert(v.end(), b.data().begin(), b.data().end());
  return Tensor<double>(Shape{a.dim(0) + b.dim(0), a.dim(1)}, std::move(v));
}

}  // namespace

TEST_CASE("sharpen") {
  SUBCASE("temperature one is plain softmax") {
    Rng rng(3);
    const Tensor<double> z = random_tensor({5, 7}, rng, -4, 4);
    CHECK(obj::sharpen(z, 1.0) == refix::grad::kernels::softmax(z, 1.0));
  }
  SUBCASE("[0, ln 4] at T=0.5 gives [1/17, 16/17]") {
    const Tensor<double> p = obj::sharpen(Tensor<double>(Shape{1, 2}, {0.0, std::log(4.0)}), 0.5);
    CHECK(std::fabs(p[0] - 1.0 / 17.0) < 1e-9);
    CHECK(std::fabs(p[1] - 16.0 / 17.0) < 1e-9);
  }
  SUBCASE("equal logits give the uniform distribution") {
    for (double t : {0.1, 0.5, 3.0}) {
      const Tensor<double> p = obj::sharpen(Tensor<double>(Shape{1, 4}, {2, 2, 2, 2}), t);
      for (double v : p.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
    }
  }
  SUBCASE("low temperature approaches one-hot") {
    const Tensor<double> p = obj::sharpen(Tensor<double>(Shape{1, 3}, {0.3, 1.3, -2.0}), 0.01);
    CHECK(p[1] > 0.999);
  }
  SUBCASE("rows sum to one") {
    Rng rng(4);
    const Tensor<float> z = random_tensor({16, 10}, rng, -30, 30).cast<float>();
    const Tensor<float> p = obj::sharpen(z, 0.5);
    for (std::size_t r = 0; r < 16; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < 10; ++j) s += p[r * 10 + j];
      CHECK(std::fabs(s - 1.0) < 1e-6);
    }
  }
  CHECK_THROWS_AS(obj::sharpen(Tensor<double>(Shape{1, 2}), 0.0), ContractError);
  CHECK_THROWS_AS(obj::sharpen(Tensor<double>(Shape{1, 2}), -1.0), ContractError);
}

TEST_CASE("supervised loss hand cases") {
  Tape<double> tape(false);
  const std::vector<std::size_t> one{1};
  auto l = obj::supervised_loss(tape.constant(logits_of({0.25, 0.75}, 2)), std::span(one));
  CHECK(l.value().item() == doctest::Approx(-std::log(0.75)).epsilon(1e-14));

  const std::vector<std::size_t> labels{0, 3, 2};
  auto uniform = obj::supervised_loss(tape.constant(Tensor<double>(Shape{3, 4}, 0.5)), std::span(labels));
  CHECK(uniform.value().item() == doctest::Approx(std::log(4.0)).epsilon(1e-14));

  auto certain = obj::supervised_loss(tape.constant(Tensor<double>(Shape{1, 2}, {0.0, -800.0})),
                                      std::span(labels).first(1));
  CHECK(certain.value().item() == 0.0);

  const std::vector<std::size_t> bad{2};
  CHECK_THROWS_AS(obj::supervised_loss(tape.constant(Tensor<double>(Shape{1, 2})), std::span(bad)), ContractError);
}

TEST_CASE("branch selection") {
  const auto policy = fixed(0.95, 2);
  const auto d = obj::select_branches(Tensor<double>(Shape{3, 2}, {0.96, 0.04, 0.95, 0.05, 0.5, 0.5}), policy);
  REQUIRE(d.size() == 3);
  CHECK(d[0].branch == obj::Branch::kHard);
  CHECK(d[0].predicted == 0);
  CHECK(d[1].branch == obj::Branch::kHard);  // boundary counts as confident
  CHECK(d[2].branch == obj::Branch::kSoft);
  CHECK(d[0].threshold == 0.95);

  SUBCASE("boundary is inclusive in single precision too") {
    const auto f = obj::select_branches(Tensor<float>(Shape{1, 2}, {0.95f, 0.05f}), policy);
    CHECK(f[0].branch == obj::Branch::kHard);
  }
  SUBCASE("near-probability rows are renormalized, others rejected") {
    CHECK_NOTHROW(obj::select_branches(Tensor<double>(Shape{1, 2}, {0.96, 0.04 + 5e-5}), policy));
    CHECK_THROWS_AS(obj::select_branches(Tensor<double>(Shape{1, 2}, {0.96, 0.05}), policy), ContractError);
    CHECK_THROWS_AS(obj::select_branches(Tensor<double>(Shape{1, 2}, {1.5, -0.5}), policy), ContractError);
  }
  SUBCASE("partition of random batches") {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
      const Tensor<double> q = obj::sharpen(random_tensor({32, 5}, rng, -5, 5), 1.0);
      const auto ds = obj::select_branches(q, fixed(0.7, 5));
      obj::ObjectiveConfig cfg;
      const auto m = obj::mask_and_utilization(ds, cfg);
      CHECK(m.hard + m.soft == 32);
      for (const auto& x : ds) CHECK((x.branch == obj::Branch::kHard) == (x.confidence >= 0.7));
    }
  }
}

TEST_CASE("unsupervised cross-entropy uses the full batch as denominator") {
  Tape<double> tape(false);
  SUBCASE("one confident sample of two with a flat prediction") {
    const std::vector<obj::BranchDecision> d{decision(obj::Branch::kHard, 0), decision(obj::Branch::kSoft, 1)};
    auto l = obj::unsupervised_ce<double>(d, {true, false}, tape.constant(logits_of({0.5, 0.5, 0.3, 0.7}, 2)));
    CHECK(l.value().item() == doctest::Approx(std::log(2.0) / 2.0).epsilon(1e-14));
  }
  SUBCASE("no rows gives zero") {
    const std::vector<obj::BranchDecision> d(4, decision(obj::Branch::kSoft, 0));
    auto l = obj::unsupervised_ce<double>(d, std::vector<bool>(4, false), tape.constant(Tensor<double>(Shape{4, 3}, 1.0)));
    CHECK(l.value().item() == 0.0);
  }
  SUBCASE("certain strong prediction gives zero") {
    const std::vector<obj::BranchDecision> d{decision(obj::Branch::kHard, 1), decision(obj::Branch::kSoft, 0),
                                             decision(obj::Branch::kSoft, 0), decision(obj::Branch::kSoft, 0)};
    auto l = obj::unsupervised_ce<double>(d, {true, false, false, false},
                                          tape.constant(Tensor<double>(Shape{4, 2}, {-900, 0, 0, 0, 0, 0, 0, 0})));
    CHECK(l.value().item() == 0.0);
  }
}

TEST_CASE("KL term hand cases") {
  Tape<double> tape(false);
  SUBCASE("one-hot target against a flat prediction is ln 2") {
    const Tensor<double> weak(Shape{1, 2}, {0.0, -2000.0});
    auto l = obj::kl_loss<double>({true}, weak, tape.constant(Tensor<double>(Shape{1, 2}, 0.0)), 0.5);
    CHECK(l.value().item() == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  }
  SUBCASE("matching distributions give zero") {
    Rng rng(6);
    const Tensor<double> weak = random_tensor({3, 4}, rng);
    Tensor<double> strong = weak;
    for (double& v : strong.data()) v /= 0.5;  // softmax(weak / T) == softmax(strong)
    auto l = obj::kl_loss<double>({true, true, true}, weak, tape.constant(strong), 0.5);
    CHECK(std::fabs(l.value().item()) < 1e-15);
  }
  SUBCASE("matches an independent reference") {
    Rng rng(7);
    const Tensor<double> weak = random_tensor({4, 3}, rng, -3, 3);
    const Tensor<double> strong = random_tensor({4, 3}, rng, -3, 3);
    const std::vector<bool> rows{true, false, true, true};
    auto l = obj::kl_loss<double>(rows, weak, tape.constant(strong), 0.5);
    double expected = 0.0;
    for (std::size_t b = 0; b < 4; ++b) {
      if (!rows[b]) continue;
      std::vector<double> p(3), q(3);
      double sp = 0, sq = 0;
      for (std::size_t j = 0; j < 3; ++j) {
        p[j] = std::exp(weak[b * 3 + j] / 0.5);
        q[j] = std::exp(strong[b * 3 + j]);
        sp += p[j];
        sq += q[j];
      }
      for (std::size_t j = 0; j < 3; ++j) {
        p[j] /= sp;
        q[j] /= sq;
      }
      expected += kl_reference(p, q);
    }
    CHECK(l.value().item() == doctest::Approx(expected / 4.0).epsilon(1e-12));
  }
}

TEST_CASE("total loss") {
  CHECK(obj::total_loss(0.5, 0.2, 0.1, 1.0).loss_total == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(obj::total_loss(0.5, 0.2, 0.1, 0.0).loss_total == 0.5);
  CHECK_THROWS_AS(obj::total_loss(NAN, 0, 0, 1), refix::NumericError);
}

TEST_CASE("objective algebra on random batches") {
  Rng rng(8);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t k = 3 + rng.below(6);
    const std::size_t n = 4 + rng.below(20);
    const Tensor<double> lab = random_tensor({5, k}, rng, -3, 3);
    std::vector<std::size_t> labels(5);
    for (auto& y : labels) y = rng.below(k);
    const Tensor<double> weak = random_tensor({n, k}, rng, -4, 4);
    const Tensor<double> strong = random_tensor({n, k}, rng, -4, 4);
    const double tau = rng.uniform(0.3, 0.9);
    const auto policy = fixed(tau, k);
    for (auto mode : {obj::AblationMode::kHardOnly, obj::AblationMode::kSoftOnly, obj::AblationMode::kBoth}) {
      obj::ObjectiveConfig cfg;
      cfg.tau = tau;
      cfg.mode = mode;
      cfg.lambda_u = rng.uniform(0.1, 2.0);
      Tape<double> tape(false);
      const auto r = obj::compute_objective(tape.constant(lab), std::span(labels), weak, tape.constant(strong), policy, cfg);
      const auto& b = r.breakdown;
      CHECK(b.loss_total == b.loss_sup + cfg.lambda_u * (b.loss_unsup_ce + b.loss_kl));
      CHECK(b.hard_count + b.soft_count == n);

      const auto fused = obj::fused_unsupervised(r.decisions, weak, strong, cfg);
      CHECK(fused.ce == b.loss_unsup_ce);
      CHECK(fused.kl == b.loss_kl);

      if (mode == obj::AblationMode::kHardOnly) {
        CHECK(b.loss_kl == 0.0);
        CHECK(b.utilization == 1.0 - b.mask_ratio);
      }
      if (mode == obj::AblationMode::kSoftOnly) CHECK(b.loss_unsup_ce == 0.0);
      if (mode == obj::AblationMode::kBoth) CHECK(b.utilization == 1.0);

      // duplicated unlabeled batch
      Tape<double> tape2(false);
      const auto r2 = obj::compute_objective(tape2.constant(lab), std::span(labels), concat_rows(weak, weak),
                                             tape2.constant(concat_rows(strong, strong)), policy, cfg);
      CHECK(r2.breakdown.loss_unsup_ce == b.loss_unsup_ce);
      CHECK(r2.breakdown.loss_kl == b.loss_kl);
    }
  }
}

TEST_CASE("all-confident and all-uncertain batches") {
  Tape<double> tape(false);
  const std::vector<std::size_t> labels{0};
  const Tensor<double> lab(Shape{1, 2}, {1.0, 0.0});
  const Tensor<double> confident(Shape{2, 2}, {10.0, 0.0, 0.0, 10.0});
  const Tensor<double> flat(Shape{2, 2}, 0.0);
  const Tensor<double> strong(Shape{2, 2}, {0.3, -0.1, 0.2, 0.4});
  obj::ObjectiveConfig cfg;
  const auto policy = fixed(0.95, 2);

  const auto hard = obj::compute_objective(tape.constant(lab), std::span(labels), confident, tape.constant(strong), policy, cfg);
  CHECK(hard.breakdown.loss_kl == 0.0);
  CHECK(hard.breakdown.loss_unsup_ce > 0.0);
  CHECK(hard.breakdown.loss_total == hard.breakdown.loss_sup + hard.breakdown.loss_unsup_ce);

  const auto soft = obj::compute_objective(tape.constant(lab), std::span(labels), flat, tape.constant(strong), policy, cfg);
  CHECK(soft.breakdown.loss_unsup_ce == 0.0);
  CHECK(soft.breakdown.mask_ratio == 1.0);

  cfg.mode = obj::AblationMode::kHardOnly;
  const auto masked = obj::compute_objective(tape.constant(lab), std::span(labels), flat, tape.constant(strong), policy, cfg);
  CHECK(masked.breakdown.loss_unsup_ce + masked.breakdown.loss_kl == 0.0);
  CHECK(masked.breakdown.utilization == 0.0);

  cfg.mode = obj::AblationMode::kSoftOnly;
  const auto none = obj::compute_objective(tape.constant(lab), std::span(labels), confident, tape.constant(strong), policy, cfg);
  CHECK(none.breakdown.loss_unsup_ce + none.breakdown.loss_kl == 0.0);
  cfg.soft_only_all_samples = true;
  const auto all = obj::compute_objective(tape.constant(lab), std::span(labels), confident, tape.constant(strong), policy, cfg);
  CHECK(all.breakdown.loss_kl > 0.0);
  CHECK(all.breakdown.utilization == 1.0);
}

TEST_CASE("objective gradients match finite differences") {
  Rng rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t k = 3 + rng.below(4);
    std::vector<std::size_t> labels{rng.below(k), rng.below(k), rng.below(k)};
    // Sharp weak logits so that both branches appear.
    const Tensor<double> weak = random_tensor({6, k}, rng, -6, 6);
    obj::ObjectiveConfig cfg;
    cfg.tau = 0.8;
    const auto policy = fixed(cfg.tau, k);
    auto build = [&](Tape<double>&, const std::vector<Var<double>>& v) {
      return obj::compute_objective(v[0], std::span(labels), weak, v[1], policy, cfg).total;
    };
    const auto r = check_gradients(build, {random_tensor({3, k}, rng, -2, 2), random_tensor({6, k}, rng, -2, 2)});
    CHECK(r.max_rel_error < 1e-6);
  }
}

TEST_CASE("targets carry no gradient") {
  // The weak view only enters through constants, so a weak-path parameter
  // feeding the targets has a zero gradient.
  Rng rng(10);
  const std::size_t k = 4;
  Tape<double> tape;
  const Var<double> weak_param = tape.parameter(random_tensor({5, k}, rng, -3, 3));
  const Var<double> strong = tape.parameter(random_tensor({5, k}, rng, -3, 3));
  const Var<double> lab = tape.parameter(random_tensor({2, k}, rng));
  const std::vector<std::size_t> labels{0, 1};
  obj::ObjectiveConfig cfg;
  cfg.tau = 0.5;
  const auto r = obj::compute_objective(lab, std::span(labels), weak_param.value(), strong, fixed(0.5, k), cfg);
  const auto grads = tape.backward(r.total);
  CHECK_FALSE(grads.reached(weak_param));
  CHECK(grads.reached(strong));
}

TEST_CASE("class-wise thresholds") {
  SUBCASE("linear mapping hand case") {
    const std::vector<std::size_t> counts{100, 50};
    const auto t = obj::cpl_update_thresholds(counts, 0, 0.95);
    CHECK(t[0] == 0.95);
    CHECK(t[1] == doctest::Approx(0.475).epsilon(1e-15));
  }
  SUBCASE("equal counts give tau exactly") {
    const std::vector<std::size_t> counts(7, 42);
    for (double v : obj::cpl_update_thresholds(counts, 10, 0.95)) CHECK(v == 0.95);
  }
  SUBCASE("warm-up scales every class below tau") {
    const std::vector<std::size_t> counts{10, 20, 30};
    const auto t = obj::cpl_update_thresholds(counts, 60, 0.9);
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(t[c] < 0.9);
      CHECK(t[c] == doctest::Approx(0.9 * static_cast<double>(counts[c]) / 60.0));
    }
  }
  SUBCASE("monotone in the count") {
    Rng rng(11);
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<std::size_t> counts(2 + rng.below(10));
      for (auto& c : counts) c = rng.below(1000);
      const auto t = obj::cpl_update_thresholds(counts, rng.below(1500), 0.95);
      for (std::size_t a = 0; a < counts.size(); ++a) {
        CHECK(t[a] >= 0.0);
        CHECK(t[a] <= 0.95);
        for (std::size_t b = 0; b < counts.size(); ++b) {
          if (counts[a] <= counts[b]) CHECK(t[a] <= t[b]);
        }
      }
    }
  }
  SUBCASE("policy tracks the latest confident prediction per sample") {
    obj::ThresholdPolicy p(obj::ThresholdMode::kCpl, 0.9, 2, 4);
    CHECK(p.unused() == 4);
    for (double v : p.thresholds()) CHECK(v == 0.0);
    const std::vector<std::size_t> idx{0, 1, 2};
    std::vector<obj::BranchDecision> d(3);
    d[0].predicted = 0, d[0].confidence = 0.95;
    d[1].predicted = 0, d[1].confidence = 0.91;
    d[2].predicted = 1, d[2].confidence = 0.5;
    p.observe(idx, d);
    CHECK(p.counts() == std::vector<std::size_t>{2, 0});
    CHECK(p.unused() == 2);
    p.refresh();
    CHECK(p.threshold(0) == 0.9);
    CHECK(p.threshold(1) == 0.0);
    d[0].predicted = 1;
    p.observe(std::span(idx).first(1), std::span(d).first(1));
    CHECK(p.counts() == std::vector<std::size_t>{1, 1});
  }
  SUBCASE("fixed policy never moves") {
    obj::ThresholdPolicy p(obj::ThresholdMode::kFixed, 0.95, 3, 10);
    const std::vector<std::size_t> idx{0};
    std::vector<obj::BranchDecision> d(1);
    d[0].confidence = 0.99;
    p.observe(idx, d);
    p.refresh();
    for (double v : p.thresholds()) CHECK(v == 0.95);
  }
}

TEST_CASE("ablation names round trip") {
  for (auto m : {obj::AblationMode::kHardOnly, obj::AblationMode::kSoftOnly, obj::AblationMode::kBoth}) {
    CHECK(obj::parse_ablation(obj::ablation_name(m)) == m);
  }
  CHECK(obj::parse_ablation("HARD-ONLY") == obj::AblationMode::kHardOnly);
  CHECK_THROWS_AS(obj::parse_ablation("mixed"), refix::ConfigError);
}
