// SPDX-License-Identifier: Apache-2.0

#include "hipo/loss.hpp"

#include <cmath>

#include "hipo/error.hpp"

namespace hipo::loss {

namespace {

constexpr std::size_t kEvalBatch = 8;

// Contexts and response views for pairs laid out chosen, rejected, chosen, ...
struct Sequences {
  std::vector<lm::TokenSeq> contexts;
  std::vector<lm::ScoredSeq> seqs;
};

void check_contexts(std::span<const seg::PreferencePair> batch, Contexts contexts) {
  if (!contexts.empty() && contexts.size() != batch.size())
    throw UsageError("one context per pair is required");
}

lm::TokenSeq context_of(std::span<const seg::PreferencePair> batch, Contexts contexts,
                        std::size_t i) {
  return contexts.empty() ? seg::encode_prompt(batch[i].prompt) : contexts[i];
}

Sequences sequences_for(std::span<const seg::PreferencePair> batch, Contexts contexts) {
  check_contexts(batch, contexts);
  Sequences out;
  out.contexts.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) out.contexts.push_back(context_of(batch, contexts, i));
  for (std::size_t i = 0; i < batch.size(); ++i) {
    out.seqs.push_back({out.contexts[i], batch[i].chosen.tokens});
    out.seqs.push_back({out.contexts[i], batch[i].rejected.tokens});
  }
  return out;
}

std::vector<diff::Var> model_leaves(diff::Graph& g, const lm::Model& model) {
  lm::check_params(model.config, model.params);
  std::vector<diff::Var> vars;
  for (const auto& p : model.params) vars.push_back(g.param(p, false));
  return vars;
}

void check_batch(std::span<const seg::PreferencePair> batch) {
  if (batch.empty()) throw EmptyBatchError();
  for (const auto& pair : batch) {
    seg::validate_spans(pair.chosen.spans, pair.chosen.tokens.size());
    seg::validate_spans(pair.rejected.spans, pair.rejected.tokens.size());
  }
}

double sum_range(std::span<const double> values, std::size_t begin, std::size_t end) {
  double acc = 0.0;
  for (std::size_t i = begin; i < end; ++i) acc += values[i];
  return acc;
}

}  // namespace

void LossConfig::validate() const {
  if (!(beta > 0.0) || !std::isfinite(beta)) throw UsageError("beta must be positive");
  bool any_positive = false;
  for (double w : weights.v) {
    if (!std::isfinite(w) || w < 0.0) throw UsageError("segment weights must be non-negative");
    any_positive = any_positive || w > 0.0;
  }
  if (!any_positive) throw UsageError("at least one segment weight must be positive");
}

LossConfig dpo_config(double beta) {
  LossConfig cfg;
  cfg.beta = beta;
  cfg.weights[SegmentKind::Y] = 1.0;
  return cfg;
}

double segment_logprob(const lm::PerTokenNLL& nll, seg::Span span) {
  if (span.begin > span.end || span.end > nll.values.size())
    throw seg::SpanError(seg::SpanError::Kind::OutOfRange, "span outside the response");
  return -sum_range(nll.values, span.begin, span.end);
}

double delta(double policy_chosen, double policy_rejected, double ref_chosen,
             double ref_rejected) {
  return policy_chosen - policy_rejected - ref_chosen + ref_rejected;
}

double segment_loss(std::span<const double> deltas, double beta) {
  if (deltas.empty()) throw EmptyBatchError();
  if (!(beta > 0.0)) throw UsageError("beta must be positive");
  double acc = 0.0;
  for (double d : deltas) acc += diff::softplus(d * -beta);
  return acc / static_cast<double>(deltas.size());
}

std::vector<PairLogprobs> pair_logprobs(const lm::Model& model,
                                        std::span<const seg::PreferencePair> pairs,
                                        Contexts contexts) {
  check_contexts(pairs, contexts);
  std::vector<PairLogprobs> out;
  out.reserve(pairs.size());
  for (std::size_t start = 0; start < pairs.size(); start += kEvalBatch) {
    const auto chunk = pairs.subspan(start, std::min(kEvalBatch, pairs.size() - start));
    diff::Graph g;
    const std::vector<diff::Var> vars = model_leaves(g, model);
    const Sequences seqs =
        sequences_for(chunk, contexts.empty() ? contexts : contexts.subspan(start, chunk.size()));
    const lm::BatchNll nll = lm::batch_nll(g, model.config, vars, seqs.seqs);
    const auto values = g.value(nll.nll);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      PairLogprobs lp;
      const seg::SegmentedResponse* sides[] = {&chunk[i].chosen, &chunk[i].rejected};
      SegmentValues* dst[] = {&lp.chosen, &lp.rejected};
      for (int s = 0; s < 2; ++s) {
        const std::size_t base = nll.offsets[2 * i + s];
        for (SegmentKind k : seg::kAllKinds) {
          const seg::Span span = sides[s]->spans.of(k);
          (*dst[s])[k] = -sum_range(values, base + span.begin, base + span.end);
        }
      }
      out.push_back(lp);
    }
  }
  return out;
}

LossVars build_loss(diff::Graph& g, const lm::ModelConfig& config,
                    std::span<const diff::Var> policy, std::span<const seg::PreferencePair> batch,
                    std::span<const PairLogprobs> reference, const LossConfig& cfg,
                    Contexts contexts) {
  cfg.validate();
  check_batch(batch);
  if (reference.size() != batch.size())
    throw UsageError("one set of reference log-probs per pair is required");
  const Sequences seqs = sequences_for(batch, contexts);
  const lm::BatchNll nll = lm::batch_nll(g, config, policy, seqs.seqs);

  LossVars vars;
  vars.deltas.resize(batch.size());
  std::array<std::vector<diff::Var>, 4> terms;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const std::size_t base_c = nll.offsets[2 * i];
    const std::size_t base_r = nll.offsets[2 * i + 1];
    for (SegmentKind k : seg::kAllKinds) {
      const seg::Span sc = batch[i].chosen.spans.of(k);
      const seg::Span sr = batch[i].rejected.spans.of(k);
      const diff::Var lp_c = g.neg(g.range_sum(nll.nll, base_c + sc.begin, base_c + sc.end));
      const diff::Var lp_r = g.neg(g.range_sum(nll.nll, base_r + sr.begin, base_r + sr.end));
      // Same left-to-right order as delta().
      diff::Var d = g.sub(lp_c, lp_r);
      d = g.sub(d, g.constant(reference[i].chosen[k]));
      d = g.add(d, g.constant(reference[i].rejected[k]));
      const auto slot = static_cast<std::size_t>(k);
      vars.deltas[i][slot] = d;
      terms[slot].push_back(g.softplus(g.scale(d, -cfg.beta)));
    }
  }
  std::vector<diff::Var> weighted;
  weighted.push_back(g.constant(0.0));
  for (SegmentKind k : seg::kAllKinds) {
    const auto slot = static_cast<std::size_t>(k);
    vars.loss[slot] = g.mean(terms[slot]);
    weighted.push_back(g.scale(vars.loss[slot], cfg.weights[k]));
  }
  vars.total = g.sum(weighted);
  return vars;
}

LossVars build_dpo_loss(diff::Graph& g, const lm::ModelConfig& config,
                        std::span<const diff::Var> policy,
                        std::span<const seg::PreferencePair> batch,
                        std::span<const PairLogprobs> reference, double beta,
                        Contexts contexts) {
  dpo_config(beta).validate();
  check_batch(batch);
  if (reference.size() != batch.size())
    throw UsageError("one set of reference log-probs per pair is required");
  const Sequences seqs = sequences_for(batch, contexts);
  const lm::BatchNll nll = lm::batch_nll(g, config, policy, seqs.seqs);

  const diff::Var zero = g.constant(0.0);
  const auto y = static_cast<std::size_t>(SegmentKind::Y);
  LossVars vars;
  std::vector<diff::Var> terms;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const diff::Var lp_c = g.neg(g.range_sum(nll.nll, nll.offsets[2 * i], nll.offsets[2 * i + 1]));
    const diff::Var lp_r =
        g.neg(g.range_sum(nll.nll, nll.offsets[2 * i + 1], nll.offsets[2 * i + 2]));
    diff::Var d = g.sub(lp_c, lp_r);
    d = g.sub(d, g.constant(reference[i].chosen[SegmentKind::Y]));
    d = g.add(d, g.constant(reference[i].rejected[SegmentKind::Y]));
    std::array<diff::Var, 4> row{zero, zero, zero, zero};
    row[y] = d;
    vars.deltas.push_back(row);
    terms.push_back(g.softplus(g.scale(d, -beta)));
  }
  vars.loss = {zero, zero, zero, g.mean(terms)};
  vars.total = vars.loss[y];
  return vars;
}

LossReport read_report(const diff::Graph& g, const LossVars& vars) {
  LossReport report;
  for (SegmentKind k : seg::kAllKinds) {
    const auto slot = static_cast<std::size_t>(k);
    report.loss[k] = g.scalar(vars.loss[slot]);
    double acc = 0.0;
    for (const auto& d : vars.deltas) acc += g.scalar(d[slot]);
    report.mean_delta[k] = acc / static_cast<double>(vars.deltas.size());
  }
  report.total = g.scalar(vars.total);
  return report;
}

LossReport hipo_loss(const lm::Model& policy, const lm::Model& reference,
                     std::span<const seg::PreferencePair> batch, const LossConfig& cfg,
                     Contexts contexts) {
  if (!(policy.config == reference.config))
    throw UsageError("policy and reference must share one architecture");
  const std::vector<PairLogprobs> ref = pair_logprobs(reference, batch, contexts);
  diff::Graph g;
  const std::vector<diff::Var> vars = model_leaves(g, policy);
  return read_report(g, build_loss(g, policy.config, vars, batch, ref, cfg, contexts));
}

double dpo_loss(const lm::Model& policy, const lm::Model& reference,
                std::span<const seg::PreferencePair> batch, double beta, Contexts contexts) {
  if (batch.empty()) throw EmptyBatchError();
  check_contexts(batch, contexts);
  std::vector<double> deltas;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const seg::PreferencePair& pair = batch[i];
    const lm::TokenSeq z = context_of(batch, contexts, i);
    const double pc = lm::sequence_logprob(lm::per_token_nll(policy, z, pair.chosen.tokens));
    const double pr = lm::sequence_logprob(lm::per_token_nll(policy, z, pair.rejected.tokens));
    const double rc = lm::sequence_logprob(lm::per_token_nll(reference, z, pair.chosen.tokens));
    const double rr = lm::sequence_logprob(lm::per_token_nll(reference, z, pair.rejected.tokens));
    deltas.push_back(delta(pc, pr, rc, rr));
  }
  return segment_loss(deltas, beta);
}

}  // namespace hipo::loss
