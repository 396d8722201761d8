// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <sstream>

#include "doctest.h"
#include "hipo/checkpoint.hpp"
#include "hipo/error.hpp"
#include "hipo/synth.hpp"
#include "hipo/trainer.hpp"
#include "support.hpp"

using namespace hipo;
using seg::SegmentKind;

namespace {

ParamSet scalar_param(double w) {
  ParamSet p;
  p.add(ParamTensor{"w", {1}, {w}});
  return p;
}

train::RegimeRow row(std::string name, std::array<double, 4> w, double lr, std::size_t epochs) {
  return train::RegimeRow{std::move(name), loss::SegmentValues{w}, lr, epochs};
}

const std::vector<seg::PreferencePair>& dataset() {
  static const auto pairs = synth::gen_dataset(24, 5, 99);
  return pairs;
}

lm::Model small_model(std::uint64_t seed = 1) { return lm::init_model(testing::small_config(seed)); }

}  // namespace

TEST_CASE("first AdamW step from a fresh state") {
  ParamSet p = scalar_param(0.0);
  ParamSet g = scalar_param(1.0);
  auto state = train::AdamWState::fresh(p);
  train::adamw_step(p, g, state, 0.01);
  // m_hat = v_hat = 1, so w = -0.01 / (1 + 1e-8).
  CHECK(std::abs(p[0].values[0] - (-0.01 / (1.0 + 1e-8))) < 1e-17);
  CHECK(std::abs(p[0].values[0] - (-0.0099999999)) < 1e-12);
  CHECK(state.step == 1);
}

TEST_CASE("AdamW leaves parameters alone for zero gradients or zero lr") {
  ParamSet p = scalar_param(0.375);
  auto state = train::AdamWState::fresh(p);
  for (int i = 0; i < 3; ++i) train::adamw_step(p, scalar_param(0.0), state, 0.01);
  CHECK(p[0].values[0] == 0.375);
  for (int i = 0; i < 3; ++i) train::adamw_step(p, scalar_param(2.5), state, 0.0);
  CHECK(p[0].values[0] == 0.375);
}

TEST_CASE("AdamW weight decay is decoupled") {
  train::AdamWConfig cfg;
  cfg.weight_decay = 0.1;
  ParamSet p = scalar_param(2.0);
  auto state = train::AdamWState::fresh(p, cfg);
  train::adamw_step(p, scalar_param(0.0), state, 0.5);
  CHECK(p[0].values[0] == doctest::Approx(2.0 - 0.5 * 0.1 * 2.0).epsilon(1e-15));
}

TEST_CASE("non-finite gradients abort with the step index") {
  ParamSet p = scalar_param(1.0);
  auto state = train::AdamWState::fresh(p);
  train::adamw_step(p, scalar_param(1.0), state, 0.01);
  GradientMap bad = p.zeros_like();
  bad[0].values[0] = NAN;
  try {
    train::adamw_step(p, bad, state, 0.01);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("step 2") != std::string::npos);
  }
}

TEST_CASE("configuration matrices") {
  const auto m = train::parse_matrix(
      R"({"beta": 0.2, "rows": [{"name": "Rq-Only", "w_rq": 1, "w_mt": 0, "w_a": 0, "w_y": 0, "lr": 1e-6, "epochs": 5}]})");
  CHECK(m.beta == 0.2);
  REQUIRE(m.rows.size() == 1);
  CHECK(m.find("Rq-Only").weights[SegmentKind::Rq] == 1.0);
  CHECK_THROWS_AS(m.find("nope"), UsageError);
  CHECK(train::parse_matrix(train::matrix_to_json(m)).rows[0].name == "Rq-Only");

  try {
    train::parse_matrix(R"({"rows": [{"name": "x", "w_mt": 0, "w_a": 0, "w_y": 1, "lr": 1, "epochs": 1}]})");
    FAIL("expected SchemaError");
  } catch (const SchemaError& e) {
    CHECK(e.key() == "rows[0].w_rq");
  }
  CHECK_THROWS_AS(train::parse_matrix(R"({"rows": []})"), UsageError);
  CHECK_THROWS_AS(train::parse_matrix(
                      R"({"rows": [{"name": "a", "w_rq": 1, "w_mt": 0, "w_a": 0, "w_y": 0, "lr": 1, "epochs": 1},
                                   {"name": "a", "w_rq": 0, "w_mt": 1, "w_a": 0, "w_y": 0, "lr": 1, "epochs": 1}]})"),
                  UsageError);
  CHECK_THROWS_AS(train::parse_matrix(
                      R"({"rows": [{"name": "a", "w_rq": -1, "w_mt": 0, "w_a": 0, "w_y": 1, "lr": 1, "epochs": 1}]})"),
                  UsageError);
  CHECK_THROWS_AS(train::parse_matrix("{"), ParseError);
}

TEST_CASE("shipped presets") {
  const auto stepwise = train::load_matrix(HIPO_SOURCE_DIR "/presets/paper-stepwise.json");
  REQUIRE(stepwise.rows.size() == 3);
  CHECK(stepwise.rows[0].name == "Rq-bias");
  CHECK(stepwise.rows[0].weights == loss::SegmentValues{{0.60, 0.15, 0.15, 0.10}});
  CHECK(stepwise.rows[1].weights == loss::SegmentValues{{0.20, 0.50, 0.20, 0.10}});
  CHECK(stepwise.rows[2].weights == loss::SegmentValues{{0.35, 0.30, 0.15, 0.25}});
  CHECK(stepwise.rows[0].lr == 1e-5);
  CHECK(stepwise.rows[1].lr == 8e-6);
  CHECK(stepwise.rows[2].lr == 5e-6);
  for (const auto& r : stepwise.rows) CHECK(r.epochs == 5);

  const auto individual = train::load_matrix(HIPO_SOURCE_DIR "/presets/paper-individual.json");
  REQUIRE(individual.rows.size() == 6);
  CHECK(individual.find("Rq-Only").weights == loss::SegmentValues{{1, 0, 0, 0}});
  CHECK(individual.find("A-Only").weights == loss::SegmentValues{{0, 0, 1, 0}});
  for (const auto& r : individual.rows) CHECK(r.lr == 1e-6);
}

TEST_CASE("lr 0 leaves the policy bit-identical") {
  lm::Model policy = small_model();
  const lm::Model reference = policy;
  const auto log = train::train_regime(policy, reference, dataset(), row("z", {1, 1, 1, 1}, 0.0, 2), 3, {});
  CHECK(policy.params == reference.params);
  CHECK(log.steps.size() == 2 * 3);
}

TEST_CASE("one-row stepwise equals a single regime") {
  const lm::Model reference = small_model();
  const auto r = row("Rq-bias", {0.6, 0.15, 0.15, 0.1}, 1e-3, 2);
  lm::Model a = reference, b = reference;
  const auto la = train::train_regime(a, reference, dataset(), r, 9, {});
  train::ConfigMatrix m;
  m.rows = {r};
  const auto lb = train::run_stepwise(b, reference, dataset(), m, 9, {});
  CHECK(a.params == b.params);
  REQUIRE(la.steps.size() == lb.steps.size());
  for (std::size_t i = 0; i < la.steps.size(); ++i) CHECK(train::step_json(la.steps[i]) == train::step_json(lb.steps[i]));
}

TEST_CASE("stepwise threads the policy through its rows") {
  const lm::Model reference = small_model();
  train::ConfigMatrix m;
  m.rows = {row("first", {1, 0, 0, 0}, 1e-3, 1), row("second", {0, 0, 1, 0}, 1e-3, 1)};
  lm::Model both = reference;
  const auto log = train::run_stepwise(both, reference, dataset(), m, 4, {});
  REQUIRE(log.regimes.size() == 2);
  CHECK(log.regimes[0].seed == 4);
  CHECK(log.regimes[1].seed == 5);
  CHECK(log.regimes[1].first_step == log.regimes[0].steps);
  for (std::size_t i = 1; i < log.steps.size(); ++i) CHECK(log.steps[i].step == log.steps[i - 1].step + 1);

  lm::Model only_second = reference;
  train::train_regime(only_second, reference, dataset(), m.rows[1], 5, {});
  CHECK_FALSE(both.params == only_second.params);
}

TEST_CASE("full-response weights train exactly like DPO") {
  const lm::Model reference = small_model(2);
  const auto r = row("dpo", {0, 0, 0, 1}, 1e-3, 1);
  lm::Model a = reference, b = reference;
  train::TrainOptions dpo;
  dpo.objective = train::Objective::Dpo;
  const auto la = train::train_regime(a, reference, dataset(), r, 1, {});
  const auto lb = train::train_regime(b, reference, dataset(), r, 1, dpo);
  REQUIRE(la.steps.size() == lb.steps.size());
  for (std::size_t i = 0; i < la.steps.size(); ++i)
    CHECK(std::abs(la.steps[i].loss.total - lb.steps[i].loss.total) <= 1e-12);
}

TEST_CASE("training is deterministic and leaves the reference alone") {
  testing::TempDir dir("trainer");
  const lm::Model reference = small_model(3);
  ckpt::save_checkpoint(reference, dir / "ref");
  const std::string before = ckpt::checkpoint_checksum(dir / "ref");
  const auto r = row("mix", {0.35, 0.30, 0.15, 0.25}, 1e-3, 2);
  std::ostringstream m1, m2;
  train::TrainOptions o1, o2;
  o1.metrics = &m1;
  o2.metrics = &m2;
  lm::Model a = reference, b = reference;
  train::train_regime(a, reference, dataset(), r, 6, o1);
  train::train_regime(b, reference, dataset(), r, 6, o2);
  CHECK(a.params == b.params);
  CHECK(m1.str() == m2.str());
  const std::string lines = m1.str();
  CHECK(std::count(lines.begin(), lines.end(), '\n') == 6);
  ckpt::save_checkpoint(reference, dir / "ref-after");
  CHECK(ckpt::checkpoint_checksum(dir / "ref-after") == before);
}

TEST_CASE("A-only training raises the held-out answer margin") {
  const lm::Model reference = lm::init_model(lm::ModelConfig{});
  lm::Model policy = reference;
  const auto train_set = synth::gen_dataset(64, 11, 99);
  const auto held_out = synth::gen_dataset(32, 12, 99);
  const auto before = train::mean_margins(policy, reference, held_out);
  const auto log = train::train_regime(policy, reference, train_set, row("A-Only", {0, 0, 1, 0}, 1e-3, 5), 1, {});
  const auto after = train::mean_margins(policy, reference, held_out);
  CHECK(std::abs(before[SegmentKind::A]) < 1e-12);
  CHECK(after[SegmentKind::A] > before[SegmentKind::A]);
  const auto& epochs = log.regimes.front().epoch_mean_total;
  REQUIRE(epochs.size() == 5);
  CHECK(epochs.back() < epochs.front());
}

TEST_CASE("oversized records fail the preflight") {
  lm::Model policy = small_model();
  auto data = dataset();
  data.push_back(seg::make_pair(std::string(200, 'p'), seg::make_response("a", "b", "c"),
                                seg::make_response("a", "b", "d")));
  CHECK_THROWS_AS(train::train_regime(policy, policy, data, row("x", {1, 0, 0, 0}, 1e-3, 1), 0, {}), DataError);
  CHECK_THROWS_AS(train::train_regime(policy, policy, {}, row("x", {1, 0, 0, 0}, 1e-3, 1), 0, {}), UsageError);
}
