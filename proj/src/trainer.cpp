// SPDX-License-Identifier: Apache-2.0

#include "hipo/trainer.hpp"

#include <chrono>
#include <cmath>
#include <numeric>
#include <fstream>
#include <set>
#include <sstream>

#include "hipo/error.hpp"
#include "hipo/rng.hpp"
#include "json.hpp"

namespace hipo::train {

namespace {

using nlohmann::json;
using seg::SegmentKind;

void check_finite_grads(const GradientMap& grads, std::uint64_t step) {
  for (const auto& g : grads)
    for (double v : g.values)
      if (!std::isfinite(v))
        throw NumericError("adamw_step",
                           "non-finite gradient for " + g.name + " at step " + std::to_string(step));
}

double number_at(const json& row, const char* key, const std::string& path) {
  if (!row.contains(key) || !row[key].is_number()) throw SchemaError(path + "." + key);
  return row[key].get<double>();
}

void clip_global_norm(GradientMap& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (double v : g.values) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  const double s = max_norm / norm;
  for (auto& g : grads)
    for (double& v : g.values) v *= s;
}

struct StepResult {
  loss::LossReport report;
  GradientMap grads;
};

StepResult loss_and_grads(const lm::Model& policy, std::span<const seg::PreferencePair> batch,
                          std::span<const loss::PairLogprobs> ref, const RegimeRow& row,
                          const TrainOptions& options) {
  diff::Graph g;
  std::vector<diff::Var> leaves;
  leaves.reserve(policy.params.size());
  for (const auto& p : policy.params) leaves.push_back(g.param(p, true));

  loss::LossVars vars;
  if (options.objective == Objective::Dpo) {
    vars = loss::build_dpo_loss(g, policy.config, leaves, batch, ref, options.beta);
  } else {
    loss::LossConfig cfg{options.beta, row.weights};
    vars = loss::build_loss(g, policy.config, leaves, batch, ref, cfg);
  }
  g.backward(vars.total);

  StepResult out{loss::read_report(g, vars), policy.params.zeros_like()};
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    const auto grad = g.grad(leaves[i]);
    std::copy(grad.begin(), grad.end(), out.grads[i].values.begin());
  }
  return out;
}

TrainLog train_with_reference(lm::Model& policy, const std::vector<seg::PreferencePair>& dataset,
                              std::span<const loss::PairLogprobs> ref, const RegimeRow& row,
                              std::uint64_t seed, const TrainOptions& options,
                              std::size_t first_step) {
  row.validate();
  if (options.batch_size == 0) throw UsageError("batch size must be positive");

  TrainLog log;
  RegimeSummary summary{row.name, seed, row.lr, first_step, 0, {}};
  AdamWState state = AdamWState::fresh(policy.params, options.adamw);
  Rng rng(seed);
  std::vector<std::size_t> order(dataset.size());
  std::size_t step = first_step;

  for (std::size_t epoch = 1; epoch <= row.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(order));
    double epoch_total = 0.0;
    std::size_t epoch_steps = 0;
    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
      const std::size_t end = std::min(order.size(), start + options.batch_size);
      std::vector<seg::PreferencePair> batch;
      std::vector<loss::PairLogprobs> batch_ref;
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(dataset[order[i]]);
        batch_ref.push_back(ref[order[i]]);
      }
      StepResult result = loss_and_grads(policy, batch, batch_ref, row, options);
      if (options.max_grad_norm) clip_global_norm(result.grads, *options.max_grad_norm);
      adamw_step(policy.params, result.grads, state, row.lr);
      round_to_f32(policy.params);

      StepReport report{step, row.name, epoch, result.report};
      if (options.metrics) *options.metrics << step_json(report) << '\n';
      epoch_total += report.loss.total;
      ++epoch_steps;
      ++step;
      log.steps.push_back(std::move(report));
    }
    summary.epoch_mean_total.push_back(epoch_total / static_cast<double>(epoch_steps));
  }
  if (options.metrics) options.metrics->flush();
  summary.steps = step - first_step;
  log.regimes.push_back(std::move(summary));
  return log;
}

void check_inputs(const lm::Model& policy, const lm::Model& reference,
                  const std::vector<seg::PreferencePair>& dataset) {
  if (dataset.empty()) throw UsageError("training dataset is empty");
  if (!(policy.config == reference.config))
    throw UsageError("policy and reference must share one architecture");
  lm::check_params(policy.config, policy.params);
  lm::check_params(reference.config, reference.params);
  seg::preflight(dataset, policy.config.context_length);
}

}  // namespace

AdamWState AdamWState::fresh(const ParamSet& params, AdamWConfig config) {
  return AdamWState{config, params.zeros_like(), params.zeros_like(), 0};
}

void adamw_step(ParamSet& params, const GradientMap& grads, AdamWState& state, double lr) {
  if (!params.same_layout(grads) || !params.same_layout(state.m) || !params.same_layout(state.v))
    throw UsageError("gradients and optimizer state must match the parameter layout");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw UsageError("learning rate must be non-negative");
  const std::uint64_t t = state.step + 1;
  check_finite_grads(grads, t);

  const AdamWConfig& c = state.config;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = params[i].values;
    const auto& g = grads[i].values;
    auto& m = state.m[i].values;
    auto& v = state.v[i].values;
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      w[j] -= lr * (m_hat / (std::sqrt(v_hat) + c.eps) + c.weight_decay * w[j]);
    }
  }
  state.step = t;
}

void RegimeRow::validate() const {
  if (name.empty()) throw UsageError("regime row needs a name");
  loss::LossConfig{loss::kDefaultBeta, weights}.validate();
  if (!(lr >= 0.0) || !std::isfinite(lr))
    throw UsageError("regime " + name + ": learning rate must be non-negative");
  if (epochs == 0) throw UsageError("regime " + name + ": epochs must be positive");
}

void ConfigMatrix::validate() const {
  if (!(beta > 0.0) || !std::isfinite(beta)) throw UsageError("beta must be positive");
  if (rows.empty()) throw UsageError("configuration matrix has no rows");
  std::set<std::string> names;
  for (const auto& row : rows) {
    row.validate();
    if (!names.insert(row.name).second) throw UsageError("duplicate regime name: " + row.name);
  }
}

const RegimeRow& ConfigMatrix::find(std::string_view name) const {
  for (const auto& row : rows)
    if (row.name == name) return row;
  throw UsageError("unknown regime: " + std::string(name));
}

ConfigMatrix parse_matrix(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError("malformed configuration matrix", e.byte);
  }
  if (!doc.is_object()) throw SchemaError("(root)");
  ConfigMatrix matrix;
  if (doc.contains("beta")) {
    if (!doc["beta"].is_number()) throw SchemaError("beta");
    matrix.beta = doc["beta"].get<double>();
  }
  if (!doc.contains("rows") || !doc["rows"].is_array()) throw SchemaError("rows");
  for (std::size_t i = 0; i < doc["rows"].size(); ++i) {
    const json& r = doc["rows"][i];
    const std::string path = "rows[" + std::to_string(i) + "]";
    if (!r.is_object()) throw SchemaError(path);
    RegimeRow row;
    if (!r.contains("name") || !r["name"].is_string()) throw SchemaError(path + ".name");
    row.name = r["name"].get<std::string>();
    row.weights[SegmentKind::Rq] = number_at(r, "w_rq", path);
    row.weights[SegmentKind::Mt] = number_at(r, "w_mt", path);
    row.weights[SegmentKind::A] = number_at(r, "w_a", path);
    row.weights[SegmentKind::Y] = number_at(r, "w_y", path);
    row.lr = number_at(r, "lr", path);
    if (!r.contains("epochs") || !r["epochs"].is_number_unsigned())
      throw SchemaError(path + ".epochs");
    row.epochs = r["epochs"].get<std::size_t>();
    matrix.rows.push_back(std::move(row));
  }
  matrix.validate();
  return matrix;
}

ConfigMatrix load_matrix(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_matrix(buffer.str());
}

std::string matrix_to_json(const ConfigMatrix& matrix) {
  json rows = json::array();
  for (const auto& r : matrix.rows)
    rows.push_back(json{{"name", r.name},
                        {"w_rq", r.weights[SegmentKind::Rq]},
                        {"w_mt", r.weights[SegmentKind::Mt]},
                        {"w_a", r.weights[SegmentKind::A]},
                        {"w_y", r.weights[SegmentKind::Y]},
                        {"lr", r.lr},
                        {"epochs", r.epochs}});
  return json{{"beta", matrix.beta}, {"rows", rows}}.dump(2) + "\n";
}

std::string step_json(const StepReport& s) {
  json deltas = json::object();
  for (SegmentKind k : seg::kAllKinds) deltas[seg::to_string(k)] = s.loss.mean_delta[k];
  json line{{"step", s.step},
            {"regime", s.regime},
            {"epoch", s.epoch},
            {"L_rq", s.loss.loss[SegmentKind::Rq]},
            {"L_mt", s.loss.loss[SegmentKind::Mt]},
            {"L_a", s.loss.loss[SegmentKind::A]},
            {"L_y", s.loss.loss[SegmentKind::Y]},
            {"total", s.loss.total},
            {"mean_delta_per_segment", deltas}};
  return line.dump();
}

std::string summary_json(const TrainLog& log) {
  json regimes = json::array();
  for (const auto& r : log.regimes)
    regimes.push_back(json{{"name", r.name},
                           {"seed", r.seed},
                           {"lr", r.lr},
                           {"first_step", r.first_step},
                           {"steps", r.steps},
                           {"epoch_mean_total", r.epoch_mean_total},
                           {"optimizer_state", "reset"}});
  return json{{"regimes", regimes},
              {"total_steps", log.steps.size()},
              {"wall_seconds", log.wall_seconds}}
             .dump(2) +
         "\n";
}

TrainLog train_regime(lm::Model& policy, const lm::Model& reference,
                      const std::vector<seg::PreferencePair>& dataset, const RegimeRow& row,
                      std::uint64_t seed, const TrainOptions& options, std::size_t first_step) {
  const auto t0 = std::chrono::steady_clock::now();
  check_inputs(policy, reference, dataset);
  const auto ref = loss::pair_logprobs(reference, dataset);
  TrainLog log = train_with_reference(policy, dataset, ref, row, seed, options, first_step);
  log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return log;
}

TrainLog run_stepwise(lm::Model& policy, const lm::Model& reference,
                      const std::vector<seg::PreferencePair>& dataset, const ConfigMatrix& matrix,
                      std::uint64_t seed, const TrainOptions& options) {
  const auto t0 = std::chrono::steady_clock::now();
  matrix.validate();
  check_inputs(policy, reference, dataset);
  const auto ref = loss::pair_logprobs(reference, dataset);
  TrainLog log;
  for (std::size_t i = 0; i < matrix.rows.size(); ++i) {
    TrainLog part = train_with_reference(policy, dataset, ref, matrix.rows[i], seed + i, options,
                                         log.steps.size());
    for (auto& s : part.steps) log.steps.push_back(std::move(s));
    for (auto& r : part.regimes) log.regimes.push_back(std::move(r));
  }
  log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return log;
}

loss::SegmentValues mean_margins(const lm::Model& policy, const lm::Model& reference,
                                 std::span<const seg::PreferencePair> pairs) {
  if (pairs.empty()) throw loss::EmptyBatchError();
  const auto pol = loss::pair_logprobs(policy, pairs);
  const auto ref = loss::pair_logprobs(reference, pairs);
  loss::SegmentValues out;
  for (SegmentKind k : seg::kAllKinds) {
    double acc = 0.0;
    for (std::size_t i = 0; i < pairs.size(); ++i)
      acc += loss::delta(pol[i].chosen[k], pol[i].rejected[k], ref[i].chosen[k], ref[i].rejected[k]);
    out[k] = acc / static_cast<double>(pairs.size());
  }
  return out;
}

}  // namespace hipo::train
