// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite. Prints one PASS/FAIL line per criterion; exits 1 when any
// fails. Pass criterion numbers as arguments to run a subset.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>

#include "hipo/checkpoint.hpp"
#include "hipo/llm.hpp"
#include "hipo/mock_llm.hpp"
#include "hipo/synth.hpp"
#include "hipo/trainer.hpp"
#include "hipo/verify.hpp"
#include "support.hpp"

using namespace hipo;
namespace fs = std::filesystem;
using seg::SegmentKind;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(6);
  s << v;
  return s.str();
}

// Policy and reference that share an architecture but not weights.
std::pair<lm::Model, lm::Model> model_pair(lm::ModelConfig cfg, std::uint64_t seed, double jitter) {
  cfg.seed = seed;
  lm::Model policy = lm::init_model(cfg);
  cfg.seed = seed + 7919;
  lm::Model reference = lm::init_model(cfg);
  reference.config.seed = seed;
  Rng rng(seed);
  for (auto& t : policy.params)
    for (auto& v : t.values) v += rng.normal(0.0, jitter);
  return {std::move(policy), std::move(reference)};
}

std::vector<train::RegimeRow> preset_rows() {
  std::vector<train::RegimeRow> rows;
  for (const char* name : {"paper-stepwise", "paper-individual"})
    for (const auto& r : train::load_matrix(std::string(HIPO_SOURCE_DIR "/presets/") + name + ".json").rows)
      rows.push_back(r);
  return rows;
}

Outcome dpo_reduction() {
  Rng rng(1);
  double worst = 0.0;
  lm::ModelConfig cfg;
  for (std::uint64_t m = 0; m < 10; ++m) {
    const auto [policy, reference] = model_pair(cfg, m, 0.2);
    for (int b = 0; b < 10; ++b) {
      const auto batch = testing::random_pairs(rng, rng.between(1, 8), 12);
      const double beta = 0.05 + rng.uniform();
      loss::LossConfig lc = loss::dpo_config(beta);
      const double hipo = loss::hipo_loss(policy, reference, batch, lc).total;
      worst = std::max(worst, std::abs(hipo - loss::dpo_loss(policy, reference, batch, beta)));
    }
  }
  return {worst <= 1e-12, "100 batches, max |hipo - dpo| = " + fmt(worst)};
}

Outcome init_identity() {
  const lm::Model m = lm::init_model(lm::ModelConfig{});
  Rng rng(2);
  const auto batch = testing::random_pairs(rng, 16, 12);
  double worst = 0.0;
  const auto rows = preset_rows();
  for (const auto& row : rows) {
    loss::LossConfig cfg;
    cfg.weights = row.weights;
    const auto r = loss::hipo_loss(m, m, batch, cfg);
    for (SegmentKind k : seg::kAllKinds) worst = std::max(worst, std::abs(r.loss[k] - std::numbers::ln2));
  }
  return {worst <= 1e-9, std::to_string(rows.size()) + " rows x 4 segments, max |L_k - ln 2| = " + fmt(worst)};
}

Outcome additivity() {
  Rng rng(3);
  const auto pairs = testing::random_pairs(rng, 1000, 20);
  const auto [policy, reference] = model_pair(testing::small_config(3), 3, 0.3);
  const auto pol = loss::pair_logprobs(policy, pairs);
  const auto ref = loss::pair_logprobs(reference, pairs);
  double worst = 0.0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    auto d = [&](SegmentKind k) {
      return loss::delta(pol[i].chosen[k], pol[i].rejected[k], ref[i].chosen[k], ref[i].rejected[k]);
    };
    worst = std::max(worst, std::abs(d(SegmentKind::Y) - (d(SegmentKind::Rq) + d(SegmentKind::Mt) + d(SegmentKind::A))));
  }
  return {worst <= 1e-12, "1000 partitions, max |dY - sum| = " + fmt(worst)};
}

Outcome oracle() {
  const auto r = verify::run_oracle(4, 50);
  return {r.cases == 50 && r.max_error() <= 1e-10, std::to_string(r.cases) + " cases, max error " + fmt(r.max_error())};
}

Outcome gradients() {
  lm::ModelConfig cfg;
  cfg.seed = 1;
  const lm::Model policy = lm::init_model(cfg);
  cfg.seed = 2;
  lm::Model reference = lm::init_model(cfg);
  reference.config.seed = 1;
  const auto r = verify::grad_check_loss(policy, reference, verify::gradcheck_batch(), preset_rows(), 0.1, 1e-5);
  return {r.max_error < 1e-4 && r.max_reference_grad == 0.0,
          std::to_string(r.rows.size()) + " rows, max rel error " + fmt(r.max_error) + " (" + r.worst_row + ", " +
              r.worst_param + "), max |ref grad| " + fmt(r.max_reference_grad)};
}

// Shared by criteria 6 and 8: the stepwise preset on 512 pairs.
struct StepwiseRun {
  lm::Model init;
  lm::Model policy;
  train::TrainLog log;
  std::string ref_before, ref_after_disk, ref_after_memory;
  double seconds = 0.0;
};

constexpr std::uint64_t kStepwiseSeed = 42;

const train::ConfigMatrix& stepwise_matrix() {
  static const auto m = train::load_matrix(HIPO_SOURCE_DIR "/presets/paper-stepwise.json");
  return m;
}

const std::vector<seg::PreferencePair>& desk_data() {
  static const auto d = synth::gen_dataset(512, kStepwiseSeed, 99);
  return d;
}

std::string model_checksum(const lm::Model& m, const fs::path& dir) {
  ckpt::save_checkpoint(m, dir);
  return ckpt::checkpoint_checksum(dir);
}

StepwiseRun& stepwise_run(const testing::TempDir& dir) {
  static std::optional<StepwiseRun> run;
  if (run) return *run;
  const auto start = std::chrono::steady_clock::now();
  lm::ModelConfig cfg;
  cfg.seed = kStepwiseSeed;
  StepwiseRun r;
  r.init = lm::init_model(cfg);
  ckpt::save_checkpoint(r.init, dir / "reference");
  r.ref_before = ckpt::checkpoint_checksum(dir / "reference");
  const lm::Model reference = ckpt::load_checkpoint(dir / "reference");
  r.policy = reference;
  train::TrainOptions opts;
  opts.beta = stepwise_matrix().beta;
  r.log = train::run_stepwise(r.policy, reference, desk_data(), stepwise_matrix(), kStepwiseSeed, opts);
  r.ref_after_disk = ckpt::checkpoint_checksum(dir / "reference");
  r.ref_after_memory = model_checksum(reference, dir / "reference-after");
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  run = std::move(r);
  return *run;
}

Outcome frozen_reference(const testing::TempDir& dir) {
  const auto& r = stepwise_run(dir);
  const bool same = r.ref_before == r.ref_after_disk && r.ref_before == r.ref_after_memory;
  return {same, std::to_string(r.log.steps.size()) + " steps, reference sha256 " + r.ref_before.substr(0, 16) +
                    (same ? " unchanged" : " changed")};
}

Outcome segment_targeting() {
  const auto matrix = train::load_matrix(HIPO_SOURCE_DIR "/presets/paper-individual.json");
  train::RegimeRow scaled = matrix.find("A-Only");
  scaled.lr = 1e-3;
  const auto held_out = synth::gen_dataset(128, 1000, 99);
  int targeted = 0;
  bool all_rise = true, all_start_zero = true;
  std::string per_seed;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    lm::ModelConfig cfg;
    cfg.seed = seed;
    const lm::Model reference = lm::init_model(cfg);
    lm::Model policy = reference;
    const auto before = train::mean_margins(policy, reference, held_out);
    train::train_regime(policy, reference, synth::gen_dataset(512, seed, 99), scaled, seed, {});
    const auto after = train::mean_margins(policy, reference, held_out);
    const double gain_a = after[SegmentKind::A] - before[SegmentKind::A];
    const double gain_rq = after[SegmentKind::Rq] - before[SegmentKind::Rq];
    all_start_zero = all_start_zero && std::abs(before[SegmentKind::A]) < 1e-9;
    all_rise = all_rise && after[SegmentKind::A] > 0.0;
    targeted += gain_a > gain_rq;
    per_seed += " [dA " + fmt(gain_a) + ", dRq " + fmt(gain_rq) + "]";
  }
  return {all_start_zero && all_rise && targeted >= 4,
          std::to_string(targeted) + "/5 seeds with dA gain > dRq gain;" + per_seed};
}

Outcome stepwise_plumbing(const testing::TempDir& dir) {
  const auto& r = stepwise_run(dir);
  const auto& m = stepwise_matrix();
  const std::string final_sum = model_checksum(r.policy, dir / "stepwise-final");
  bool differs = true;
  for (std::size_t i = 0; i < m.rows.size(); ++i) {
    lm::Model single = r.init;
    train::TrainOptions opts;
    opts.beta = m.beta;
    train::train_regime(single, r.init, desk_data(), m.rows[i], kStepwiseSeed + i, opts);
    differs = differs && model_checksum(single, dir / ("single-" + std::to_string(i))) != final_sum;
  }
  bool sections = r.log.regimes.size() == 3;
  double first = NAN, final_max = NAN;
  if (sections) {
    first = r.log.regimes.front().epoch_mean_total.front();
    const auto& last = r.log.regimes.back().epoch_mean_total;
    final_max = *std::max_element(last.begin(), last.end());
  }
  const bool lower = final_max < first;
  return {sections && differs && lower,
          std::to_string(r.log.regimes.size()) + " regimes, checksum " +
              (differs ? "differs from" : "matches") + " a single-row run, final-regime epoch means <= " +
              fmt(final_max) + " vs first epoch " + fmt(first)};
}

Outcome client_schemas() {
  llm::MockLlmServer server;
  llm::EndpointConfig cfg;
  cfg.url = server.url();
  cfg.model = "mock";
  cfg.backoff_base_seconds = 0.01;
  const llm::Client client(cfg);

  const auto tasks = synth::gen_tasks(20, 9, 99);
  std::vector<llm::AugmentInput> raw;
  std::vector<llm::JudgeInput> responses;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    raw.push_back({tasks[i].query, "The sum is " + tasks[i].correct_answer + ".",
                   "The sum is " + tasks[i].distractor_answer + ".", i % 2 ? llm::Preferred::B : llm::Preferred::A});
    responses.push_back({tasks[i].query, "Answer: " + tasks[i].correct_answer});
  }
  const auto records = client.augment_all(raw);
  std::size_t round_trips = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto pair = llm::to_preference_pair(records[i], raw[i]);
    round_trips += seg::parse_record(seg::serialize(pair)) == pair;
  }

  const auto scores = client.judge_all(responses);
  const auto radar = llm::aggregate_scores(scores);
  double worst = 0.0;
  for (std::size_t k = 0; k < llm::kAxes; ++k) {
    long double sum = 0.0L;
    for (const auto& r : responses) sum += llm::mock_scores(r.response).values[k];
    worst = std::max(worst, std::abs(radar.means[k] - static_cast<double>(sum / responses.size())));
  }
  return {records.size() == 20 && round_trips == 20 && scores.size() == 20 && worst <= 1e-12,
          std::to_string(round_trips) + "/20 records round-trip, 20 judged, max mean error " + fmt(worst)};
}

int shell(const std::string& cmd) {
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome determinism(const testing::TempDir& dir) {
  const std::string cli = HIPO_CLI_PATH;
  const std::string data = (dir / "individual.jsonl").string();
  const std::string log = (dir / "cli.log").string();
  if (shell(cli + " gen-synthetic --n 128 --seed 42 --out " + data + " > " + log + " 2>&1") != 0)
    return {false, "gen-synthetic failed"};
  const std::string matrix = HIPO_SOURCE_DIR "/presets/paper-individual.json";
  for (const char* run : {"run-a", "run-b"}) {
    const int code = shell(cli + " train --matrix " + matrix + " --seed 42 --data " + data + " --out " +
                           (dir / run).string() + " >> " + log + " 2>&1");
    if (code != 0) return {false, std::string(run) + " exited " + std::to_string(code)};
  }
  std::size_t compared = 0, differing = 0;
  for (const auto& entry : fs::recursive_directory_iterator(dir / "run-a")) {
    if (!entry.is_regular_file() || entry.path().filename() == "train_log.json") continue;
    const fs::path other = dir / "run-b" / fs::relative(entry.path(), dir / "run-a");
    ++compared;
    if (!fs::exists(other) || ckpt::read_file(entry.path()) != ckpt::read_file(other)) ++differing;
  }
  return {compared > 0 && differing == 0,
          std::to_string(compared) + " files compared, " + std::to_string(differing) + " differ"};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  testing::TempDir dir("acceptance");
  const std::vector<std::tuple<int, const char*, double, std::function<Outcome()>>> criteria{
      {1, "DPO reduction", 10, dpo_reduction},
      {2, "initialization identity", 5, init_identity},
      {3, "segment additivity", 5, additivity},
      {4, "brute-force oracle", 30, oracle},
      {5, "gradient correctness", 120, gradients},
      {6, "frozen reference", 600, [&] { return frozen_reference(dir); }},
      {7, "segment targeting", 900, segment_targeting},
      {8, "stepwise plumbing", 1200, [&] { return stepwise_plumbing(dir); }},
      {9, "client schemas", 30, client_schemas},
      {10, "determinism", 600, [&] { return determinism(dir); }},
  };

  int failures = 0;
  for (const auto& [id, name, limit, check] : criteria) {
    if (!only.empty() && !only.count(id)) continue;
    // Criterion 8 reuses the stepwise run timed under criterion 6.
    const double shared = id == 8 && (only.empty() || only.count(6)) ? stepwise_run(dir).seconds : 0.0;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() + shared;
    const bool pass = o.pass && seconds < limit;
    failures += !pass;
    std::cout << (pass ? "PASS" : "FAIL") << "  criterion " << id << " (" << name << "): " << o.detail << "; "
              << fmt(seconds) << " s of " << limit << " s" << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
