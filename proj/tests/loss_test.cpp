// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <numbers>

#include "doctest.h"
#include "hipo/error.hpp"
#include "hipo/loss.hpp"
#include "hipo/trainer.hpp"
#include "hipo/verify.hpp"
#include "support.hpp"

using namespace hipo;
using seg::SegmentKind;

namespace {

constexpr double kLn2 = std::numbers::ln2;

loss::LossConfig config_with(std::array<double, 4> w, double beta = 0.1) {
  loss::LossConfig c;
  c.beta = beta;
  c.weights.v = w;
  return c;
}

struct Models {
  lm::Model policy, reference;
};

Models two_models(std::uint64_t seed) {
  auto cfg = testing::small_config(seed, 16, 1);
  lm::Model policy = lm::init_model(cfg);
  cfg.seed = seed + 1000;
  lm::Model reference = lm::init_model(cfg);
  reference.config.seed = seed;
  // Larger weights than the default init so margins are far from zero.
  Rng rng(seed);
  for (auto& t : policy.params)
    for (auto& v : t.values) v += rng.normal(0.0, 0.3);
  return {policy, reference};
}

}  // namespace

TEST_CASE("segment loss values") {
  CHECK(loss::segment_loss(std::vector{0.0}, 0.1) == doctest::Approx(kLn2).epsilon(1e-15));
  CHECK(loss::segment_loss(std::vector{0.0, 0.0, 0.0}, 0.7) == doctest::Approx(kLn2).epsilon(1e-15));
  CHECK(std::abs(loss::segment_loss(std::vector{2.0}, 0.1) - 0.5981388693815919) < 1e-15);
  CHECK(std::abs(loss::segment_loss(std::vector{-2.0}, 0.1) - 0.7981388693815918) < 1e-15);
  // softplus(-x) - softplus(x) = -x
  for (double x : {0.2, 3.0, 40.0, 800.0})
    CHECK(std::abs(diff::softplus(-x) - diff::softplus(x) + x) < 1e-12 * std::max(1.0, x));
  CHECK_THROWS_AS(loss::segment_loss(std::vector<double>{}, 0.1), loss::EmptyBatchError);
  CHECK_THROWS_AS(loss::segment_loss(std::vector{1.0}, 0.0), UsageError);
}

TEST_CASE("segment loss is positive and decreasing") {
  Rng rng(1);
  std::vector<double> deltas(200);
  for (auto& d : deltas) d = rng.normal(0.0, 50.0);
  std::sort(deltas.begin(), deltas.end());
  double prev = INFINITY;
  for (double d : deltas) {
    const double l = loss::segment_loss(std::vector{d}, 0.1);
    CHECK(l > 0.0);
    CHECK(std::isfinite(l));
    CHECK(l < prev);
    prev = l;
  }
}

TEST_CASE("scaling beta against the margins leaves the loss unchanged") {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> d(8), scaled(8);
    const double c = std::ldexp(1.0, static_cast<int>(rng.between(-4, 4)));
    for (std::size_t i = 0; i < d.size(); ++i) {
      d[i] = rng.normal(0.0, 20.0);
      scaled[i] = d[i] / c;
    }
    CHECK(std::abs(loss::segment_loss(d, 0.1) - loss::segment_loss(scaled, 0.1 * c)) < 1e-12);
  }
}

TEST_CASE("delta arithmetic") {
  CHECK(loss::delta(-1.0, -2.0, -1.5, -1.5) == 1.0);
  CHECK(loss::delta(-3.25, -7.5, -3.25, -7.5) == 0.0);
  Rng rng(3);
  for (int trial = 0; trial < 1000; ++trial) {
    const double a = -rng.uniform() * 50, b = -rng.uniform() * 50, c = -rng.uniform() * 50,
                 d = -rng.uniform() * 50;
    const long double exact = static_cast<long double>(a) - b - c + d;
    CHECK(std::abs(loss::delta(a, b, c, d) - static_cast<double>(exact)) < 1e-12);
  }
}

TEST_CASE("segment log-prob") {
  const lm::PerTokenNLL nll{{kLn2, kLn2, kLn2, 0.5}};
  CHECK(loss::segment_logprob(nll, {0, 3}) == doctest::Approx(-3 * kLn2).epsilon(1e-15));
  CHECK(loss::segment_logprob(nll, {0, 4}) == lm::sequence_logprob(nll));
  CHECK_THROWS_AS(loss::segment_logprob(nll, {2, 5}), seg::SpanError);
}

TEST_CASE("identical models give ln 2 for every segment") {
  const lm::Model m = lm::init_model(testing::small_config(4));
  Rng rng(4);
  const auto batch = testing::random_pairs(rng, 6);
  for (const char* preset : {"paper-stepwise", "paper-individual"}) {
    const auto matrix = train::load_matrix(std::string(HIPO_SOURCE_DIR "/presets/") + preset + ".json");
    for (const auto& row : matrix.rows) {
      loss::LossConfig cfg;
      cfg.weights = row.weights;
      const auto r = loss::hipo_loss(m, m, batch, cfg);
      double wsum = 0.0;
      for (SegmentKind k : seg::kAllKinds) {
        CHECK(std::abs(r.loss[k] - kLn2) < 1e-9);
        CHECK(std::abs(r.mean_delta[k]) < 1e-12);
        wsum += row.weights[k];
      }
      CHECK(std::abs(r.total - wsum * kLn2) < 1e-9);
    }
  }
  CHECK(std::abs(loss::dpo_loss(m, m, batch, 0.1) - kLn2) < 1e-12);
}

TEST_CASE("full-response weights reduce to DPO") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto [policy, reference] = two_models(seed);
    Rng rng(seed);
    const auto batch = testing::random_pairs(rng, 4);
    for (double beta : {0.1, 0.5, 2.0}) {
      const auto r = loss::hipo_loss(policy, reference, batch, config_with({0, 0, 0, 1}, beta));
      CHECK(std::abs(r.total - loss::dpo_loss(policy, reference, batch, beta)) <= 1e-12);
    }
  }
}

TEST_CASE("weighted total equals the recomposed segment losses") {
  const auto [policy, reference] = two_models(7);
  Rng rng(7);
  const auto batch = testing::random_pairs(rng, 5);
  const auto pol = loss::pair_logprobs(policy, batch);
  const auto ref = loss::pair_logprobs(reference, batch);
  const std::array<double, 4> w{0.60, 0.15, 0.15, 0.10};
  const auto r = loss::hipo_loss(policy, reference, batch, config_with(w));
  double expected = 0.0;
  for (SegmentKind k : seg::kAllKinds) {
    std::vector<double> d;
    for (std::size_t i = 0; i < batch.size(); ++i)
      d.push_back(loss::delta(pol[i].chosen[k], pol[i].rejected[k], ref[i].chosen[k], ref[i].rejected[k]));
    const double lk = loss::segment_loss(d, 0.1);
    CHECK(std::abs(r.loss[k] - lk) < 1e-12);
    expected += w[static_cast<std::size_t>(k)] * lk;
  }
  CHECK(std::abs(r.total - expected) < 1e-12);
}

TEST_CASE("the loss is linear in the weights") {
  const auto [policy, reference] = two_models(8);
  Rng rng(8);
  const auto batch = testing::random_pairs(rng, 4);
  for (int trial = 0; trial < 10; ++trial) {
    std::array<double, 4> u, v, uv;
    for (std::size_t k = 0; k < 4; ++k) {
      u[k] = rng.uniform();
      v[k] = rng.uniform();
      uv[k] = u[k] + v[k];
    }
    const double lu = loss::hipo_loss(policy, reference, batch, config_with(u)).total;
    const double lv = loss::hipo_loss(policy, reference, batch, config_with(v)).total;
    const double luv = loss::hipo_loss(policy, reference, batch, config_with(uv)).total;
    CHECK(std::abs(luv - (lu + lv)) < 1e-12);
  }
}

TEST_CASE("segment margins add up to the full-response margin") {
  const auto [policy, reference] = two_models(9);
  Rng rng(9);
  const auto batch = testing::random_pairs(rng, 20, 10);
  const auto pol = loss::pair_logprobs(policy, batch);
  const auto ref = loss::pair_logprobs(reference, batch);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    auto d = [&](SegmentKind k) {
      return loss::delta(pol[i].chosen[k], pol[i].rejected[k], ref[i].chosen[k], ref[i].rejected[k]);
    };
    CHECK(std::abs(d(SegmentKind::Y) - (d(SegmentKind::Rq) + d(SegmentKind::Mt) + d(SegmentKind::A))) <= 1e-12);
  }
}

TEST_CASE("invalid loss configurations") {
  CHECK_THROWS_AS(config_with({0, 0, 0, 0}).validate(), UsageError);
  CHECK_THROWS_AS(config_with({-0.1, 0, 0, 1}).validate(), UsageError);
  CHECK_THROWS_AS(config_with({0, 0, 0, 1}, 0.0).validate(), UsageError);
  CHECK_THROWS_AS(config_with({NAN, 0, 0, 1}).validate(), UsageError);
  CHECK_NOTHROW(config_with({0.35, 0.30, 0.15, 0.25}).validate());
  const lm::Model m = lm::init_model(testing::small_config(1));
  CHECK_THROWS_AS(loss::hipo_loss(m, m, {}, config_with({0, 0, 0, 1})), loss::EmptyBatchError);
}

TEST_CASE("bigram models agree with brute-force enumeration") {
  const auto report = verify::run_oracle(21, 20);
  CHECK(report.cases == 20);
  CHECK(report.max_error() < 1e-10);
}

TEST_CASE("loss gradients pass the finite-difference check on a small model") {
  const std::vector<train::RegimeRow> rows{{"mixed", {{0.35, 0.30, 0.15, 0.25}}, 1e-5, 1},
                                           {"a-only", {{0, 0, 1, 0}}, 1e-5, 1}};
  // A 1-layer, 8-wide model keeps the sweep short.
  const auto small = lm::init_model(testing::small_config(11, 8, 1));
  auto ref = lm::init_model(testing::small_config(12, 8, 1));
  ref.config.seed = small.config.seed;
  const auto report = verify::grad_check_loss(small, ref, verify::gradcheck_batch(), rows, 0.1, 1e-5);
  CHECK(report.max_error < 1e-4);
  CHECK(report.max_reference_grad == 0.0);
}
