// SPDX-License-Identifier: Apache-2.0
//
// AdamW training over the segment-level loss, one configuration-matrix row at
// a time. The reference model is only read; its log-probs are computed once
// per dataset.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "hipo/loss.hpp"
#include "hipo/params.hpp"
#include "hipo/segdata.hpp"

namespace hipo::train {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamWState {
  AdamWConfig config;
  ParamSet m, v;
  std::uint64_t step = 0;

  static AdamWState fresh(const ParamSet& params, AdamWConfig config = {});
};

// One bias-corrected AdamW update with decoupled weight decay. Throws
// NumericError naming the step when a gradient is not finite.
void adamw_step(ParamSet& params, const GradientMap& grads, AdamWState& state, double lr);

struct RegimeRow {
  std::string name;
  loss::SegmentValues weights;
  double lr = 0.0;
  std::size_t epochs = 0;
  // Throws UsageError.
  void validate() const;
};

struct ConfigMatrix {
  double beta = loss::kDefaultBeta;
  std::vector<RegimeRow> rows;
  // Non-empty, unique names, every row valid.
  void validate() const;
  // Throws UsageError for an unknown name.
  const RegimeRow& find(std::string_view name) const;
};

// {"beta": 0.1, "rows": [{"name", "w_rq", "w_mt", "w_a", "w_y", "lr", "epochs"}]}
ConfigMatrix parse_matrix(std::string_view json_text);
ConfigMatrix load_matrix(const std::filesystem::path& path);
std::string matrix_to_json(const ConfigMatrix& matrix);

enum class Objective { Hipo, Dpo };

struct TrainOptions {
  std::size_t batch_size = 8;
  double beta = loss::kDefaultBeta;
  AdamWConfig adamw;
  // Global gradient-norm clipping; off when empty.
  std::optional<double> max_grad_norm;
  // Dpo ignores the row's weights and trains on whole responses.
  Objective objective = Objective::Hipo;
  // Receives one JSON line per optimizer step when set.
  std::ostream* metrics = nullptr;
};

struct StepReport {
  std::size_t step = 0;
  std::string regime;
  std::size_t epoch = 0;
  loss::LossReport loss;
};

struct RegimeSummary {
  std::string name;
  std::uint64_t seed = 0;
  double lr = 0.0;
  std::size_t first_step = 0;
  std::size_t steps = 0;
  std::vector<double> epoch_mean_total;
};

struct TrainLog {
  std::vector<StepReport> steps;
  std::vector<RegimeSummary> regimes;
  double wall_seconds = 0.0;
};

std::string step_json(const StepReport& step);
// Per-regime summaries and timing; kept out of the metrics stream so that the
// stream is byte-reproducible.
std::string summary_json(const TrainLog& log);

// Trains `policy` in place on one row. Step numbers continue from
// `first_step`. Throws DataError (preflight) when any pair exceeds the context.
TrainLog train_regime(lm::Model& policy, const lm::Model& reference,
                      const std::vector<seg::PreferencePair>& dataset, const RegimeRow& row,
                      std::uint64_t seed, const TrainOptions& options, std::size_t first_step = 0);

// Applies the rows in order to one evolving policy; row i uses seed + i and a
// fresh optimizer state.
TrainLog run_stepwise(lm::Model& policy, const lm::Model& reference,
                      const std::vector<seg::PreferencePair>& dataset, const ConfigMatrix& matrix,
                      std::uint64_t seed, const TrainOptions& options);

// Mean Δ_k of policy against reference over `pairs` (implicit-reward margins).
loss::SegmentValues mean_margins(const lm::Model& policy, const lm::Model& reference,
                                 std::span<const seg::PreferencePair> pairs);

}  // namespace hipo::train
