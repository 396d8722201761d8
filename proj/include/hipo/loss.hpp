// SPDX-License-Identifier: Apache-2.0
//
// Segment-level preference loss.
//
//   log pi(y_k | z)  = -sum of per-token NLL over span k
//   delta_k          = (pi+ - pi-) - (ref+ - ref-)           (log-probs)
//   L_k              = mean over the batch of softplus(-beta * delta_k)
//   loss             = w_rq L_rq + w_mt L_mt + w_a L_a + w_y L_y
//
// k = Y is the whole response and is summed on its own, not recombined from
// the three parts. Weights are used as given (no normalization).

#pragma once

#include <array>
#include <span>
#include <vector>

#include "hipo/diff.hpp"
#include "hipo/lm.hpp"
#include "hipo/segdata.hpp"

namespace hipo::loss {

using seg::SegmentKind;

class EmptyBatchError : public UsageError {
 public:
  EmptyBatchError() : UsageError("empty batch") {}
};

inline constexpr double kDefaultBeta = 0.1;

// One value per segment kind, stored in Rq, Mt, A, Y order.
struct SegmentValues {
  std::array<double, 4> v{};
  double& operator[](SegmentKind k) { return v[static_cast<std::size_t>(k)]; }
  double operator[](SegmentKind k) const { return v[static_cast<std::size_t>(k)]; }
  friend bool operator==(const SegmentValues&, const SegmentValues&) = default;
};

struct LossConfig {
  double beta = kDefaultBeta;
  SegmentValues weights;
  // Throws UsageError: beta must be positive, weights finite and non-negative
  // with at least one positive.
  void validate() const;
};

LossConfig dpo_config(double beta = kDefaultBeta);

// -sum(nll[span]) index-ascending. Throws SpanError for a span outside nll.
double segment_logprob(const lm::PerTokenNLL& nll, seg::Span span);

double delta(double policy_chosen, double policy_rejected, double ref_chosen,
             double ref_rejected);

// mean(softplus(-beta * delta)). Throws EmptyBatchError.
double segment_loss(std::span<const double> deltas, double beta);

struct PairLogprobs {
  SegmentValues chosen, rejected;
};

// Every entry point below reads pair i under the context encode_prompt(prompt),
// or under contexts[i] when `contexts` is non-empty (small-vocabulary models
// without a BOS token).
using Contexts = std::span<const lm::TokenSeq>;

// Segment log-probs of every pair under one model, evaluated in batches.
std::vector<PairLogprobs> pair_logprobs(const lm::Model& model,
                                        std::span<const seg::PreferencePair> pairs,
                                        Contexts contexts = {});

struct LossReport {
  SegmentValues loss;
  SegmentValues mean_delta;
  double total = 0.0;
};

// Graph handles of one loss evaluation.
struct LossVars {
  diff::Var total;
  std::array<diff::Var, 4> loss;
  // deltas[i][k] for pair i.
  std::vector<std::array<diff::Var, 4>> deltas;
};

// Builds the loss on `graph` for policy parameter leaves; reference log-probs
// enter as constants (one entry per pair).
LossVars build_loss(diff::Graph& graph, const lm::ModelConfig& config,
                    std::span<const diff::Var> policy, std::span<const seg::PreferencePair> batch,
                    std::span<const PairLogprobs> reference, const LossConfig& cfg,
                    Contexts contexts = {});

// Whole-response DPO built directly from sequence sums. Only the Y entries of
// the result carry values; the segment entries are constant zeros.
LossVars build_dpo_loss(diff::Graph& graph, const lm::ModelConfig& config,
                        std::span<const diff::Var> policy,
                        std::span<const seg::PreferencePair> batch,
                        std::span<const PairLogprobs> reference, double beta,
                        Contexts contexts = {});

LossReport read_report(const diff::Graph& graph, const LossVars& vars);

// Forward-only convenience entry points.
LossReport hipo_loss(const lm::Model& policy, const lm::Model& reference,
                     std::span<const seg::PreferencePair> batch, const LossConfig& cfg,
                     Contexts contexts = {});

// Standard DPO on whole responses, computed from sequence log-probs without the
// segment machinery.
double dpo_loss(const lm::Model& policy, const lm::Model& reference,
                std::span<const seg::PreferencePair> batch, double beta, Contexts contexts = {});

}  // namespace hipo::loss
