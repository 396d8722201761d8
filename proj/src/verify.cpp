// SPDX-License-Identifier: Apache-2.0

#include "hipo/verify.hpp"

#include <algorithm>
#include <cmath>

#include "hipo/rng.hpp"
#include "json.hpp"

namespace hipo::verify {

namespace {

using seg::SegmentKind;
using Real = long double;

lm::Model random_bigram(std::size_t vocab, std::size_t embed, Rng& rng) {
  lm::ModelConfig cfg;
  cfg.vocab_size = vocab;
  cfg.context_length = 8;
  cfg.embed_dim = embed;
  cfg.n_layers = 0;
  cfg.n_heads = 1;
  lm::Model model{cfg, {}};
  for (const auto& [name, shape] : lm::param_layout(cfg)) {
    std::vector<double> values(shape_product(shape));
    for (double& v : values) v = rng.normal(0.0, 1.0);
    model.params.add(ParamTensor{name, shape, std::move(values)});
  }
  return model;
}

// p(next | prev) by enumerating the vocabulary.
Real prob(const lm::Model& m, int prev, int next) {
  const std::size_t V = m.config.vocab_size, C = m.config.embed_dim;
  const auto& wte = m.params.at("wte").values;
  const auto& head = m.params.at("head.w").values;
  auto logit = [&](std::size_t v) {
    Real acc = 0;
    for (std::size_t c = 0; c < C; ++c)
      acc += static_cast<Real>(wte[static_cast<std::size_t>(prev) * C + c]) *
             static_cast<Real>(head[c * V + v]);
    return acc;
  };
  Real denom = 0;
  for (std::size_t v = 0; v < V; ++v) denom += std::exp(logit(v));
  return std::exp(logit(static_cast<std::size_t>(next))) / denom;
}

std::vector<Real> oracle_nll(const lm::Model& m, const lm::TokenSeq& z, const lm::TokenSeq& y) {
  std::vector<Real> out;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const int prev = i == 0 ? z.back() : y[i - 1];
    out.push_back(-std::log(prob(m, prev, y[i])));
  }
  return out;
}

Real oracle_segment(const std::vector<Real>& nll, seg::Span s) {
  Real acc = 0;
  for (std::size_t i = s.begin; i < s.end; ++i) acc -= nll[i];
  return acc;
}

Real softplus(Real x) { return std::log1p(std::exp(x)); }

lm::TokenSeq random_tokens(Rng& rng, std::size_t n, std::size_t vocab) {
  lm::TokenSeq t(n);
  for (int& id : t) id = static_cast<int>(rng.below(vocab));
  return t;
}

std::string bytes_of(std::span<const int> ids) {
  std::string s;
  for (int id : ids) s.push_back(static_cast<char>(id));
  return s;
}

seg::SegmentedResponse random_response(Rng& rng, std::size_t len, std::size_t vocab) {
  const lm::TokenSeq t = random_tokens(rng, len, vocab);
  const auto cut1 = static_cast<std::size_t>(rng.between(1, static_cast<long long>(len) - 2));
  const auto cut2 =
      static_cast<std::size_t>(rng.between(static_cast<long long>(cut1) + 1, static_cast<long long>(len) - 1));
  const std::span<const int> all(t);
  return seg::make_response(bytes_of(all.subspan(0, cut1)), bytes_of(all.subspan(cut1, cut2 - cut1)),
                            bytes_of(all.subspan(cut2)));
}

double diff(Real a, double b) { return static_cast<double>(std::fabs(a - static_cast<Real>(b))); }

}  // namespace

double OracleReport::max_error() const {
  return std::max({nll, segment_logprob, dpo, hipo, sequence_mass});
}

OracleReport run_oracle(std::uint64_t seed, std::size_t cases) {
  Rng rng(seed);
  OracleReport r;
  r.cases = cases;
  for (std::size_t c = 0; c < cases; ++c) {
    const auto V = static_cast<std::size_t>(rng.between(2, 5));
    const auto C = static_cast<std::size_t>(rng.between(1, 4));
    const lm::Model policy = random_bigram(V, C, rng);
    const lm::Model reference = random_bigram(V, C, rng);

    const auto n_pairs = static_cast<std::size_t>(rng.between(1, 3));
    std::vector<seg::PreferencePair> batch;
    std::vector<lm::TokenSeq> contexts;
    while (batch.size() < n_pairs) {
      const auto zlen = static_cast<std::size_t>(rng.between(1, 2));
      const lm::TokenSeq z = random_tokens(rng, zlen, V);
      const auto max_y = static_cast<long long>(8 - zlen);
      auto chosen = random_response(rng, static_cast<std::size_t>(rng.between(3, max_y)), V);
      auto rejected = random_response(rng, static_cast<std::size_t>(rng.between(3, max_y)), V);
      if (chosen.tokens == rejected.tokens) continue;
      batch.push_back(seg::make_pair(bytes_of(z), std::move(chosen), std::move(rejected)));
      contexts.push_back(z);
    }

    // Per-token NLL and segment log-probs, pair by pair.
    std::vector<std::array<Real, 4>> deltas;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      std::array<Real, 4> d{};
      const seg::SegmentedResponse* sides[] = {&batch[i].chosen, &batch[i].rejected};
      for (int s = 0; s < 2; ++s) {
        const auto& y = sides[s]->tokens;
        for (const lm::Model* m : {&policy, &reference}) {
          const auto lib = lm::per_token_nll(*m, contexts[i], y);
          const auto ref = oracle_nll(*m, contexts[i], y);
          for (std::size_t t = 0; t < y.size(); ++t) r.nll = std::max(r.nll, diff(ref[t], lib.values[t]));
          for (SegmentKind k : seg::kAllKinds) {
            const seg::Span span = sides[s]->spans.of(k);
            const Real o = oracle_segment(ref, span);
            r.segment_logprob = std::max(r.segment_logprob, diff(o, loss::segment_logprob(lib, span)));
            const Real sign = (s == 0 ? 1 : -1) * (m == &policy ? 1 : -1);
            d[static_cast<std::size_t>(k)] += sign * o;
          }
        }
      }
      deltas.push_back(d);
    }

    loss::LossConfig cfg;
    cfg.beta = 0.05 + 0.95 * rng.uniform();
    for (double& w : cfg.weights.v) w = rng.uniform();
    Real hipo = 0, dpo = 0;
    for (SegmentKind k : seg::kAllKinds) {
      Real lk = 0;
      for (const auto& d : deltas) lk += softplus(-static_cast<Real>(cfg.beta) * d[static_cast<std::size_t>(k)]);
      lk /= static_cast<Real>(deltas.size());
      hipo += static_cast<Real>(cfg.weights[k]) * lk;
      if (k == SegmentKind::Y) dpo = lk;
    }
    r.hipo = std::max(r.hipo, diff(hipo, loss::hipo_loss(policy, reference, batch, cfg, contexts).total));
    r.dpo = std::max(r.dpo, diff(dpo, loss::dpo_loss(policy, reference, batch, cfg.beta, contexts)));

    // Every response of a fixed length, scored by the library, sums to one.
    const std::size_t n = std::min<std::size_t>(4, 8 - contexts[0].size());
    std::size_t total = 1;
    for (std::size_t i = 0; i < n; ++i) total *= V;
    Real mass = 0;
    lm::TokenSeq y(n);
    for (std::size_t code = 0; code < total; ++code) {
      std::size_t rest = code;
      for (int& id : y) {
        id = static_cast<int>(rest % V);
        rest /= V;
      }
      mass += std::exp(static_cast<Real>(lm::sequence_logprob(lm::per_token_nll(policy, contexts[0], y))));
    }
    r.sequence_mass = std::max(r.sequence_mass, static_cast<double>(std::fabs(1 - mass)));
  }
  return r;
}

std::string oracle_json(const OracleReport& r) {
  return nlohmann::json{{"cases", r.cases},
                        {"max_abs_error",
                         {{"nll", r.nll},
                          {"segment_logprob", r.segment_logprob},
                          {"dpo", r.dpo},
                          {"hipo", r.hipo},
                          {"sequence_mass", r.sequence_mass}}},
                        {"max", r.max_error()}}
      .dump(2);
}

std::vector<seg::PreferencePair> gradcheck_batch() {
  using seg::make_response;
  return {
      seg::make_pair("3", make_response("3", "+0", "=3"), make_response("3", "+1", "=4")),
      seg::make_pair("5", make_response("5 ", "ok", "5"), make_response("?", "no", "6")),
      seg::make_pair("7", make_response("7", "-", "7"), make_response("x", "y", "z")),
  };
}

LossGradReport grad_check_loss(const lm::Model& policy, const lm::Model& reference,
                               const std::vector<seg::PreferencePair>& batch,
                               const std::vector<train::RegimeRow>& rows, double beta,
                               double epsilon) {
  if (rows.empty()) throw UsageError("grad_check_loss: no weight rows");
  const auto ref = loss::pair_logprobs(reference, batch);
  loss::LossConfig unit{beta, {}};
  unit.weights.v = {1.0, 1.0, 1.0, 1.0};

  const diff::MultiComputation segments = [&](diff::Graph& g, std::span<const diff::Var> leaves) {
    const loss::LossVars v = loss::build_loss(g, policy.config, leaves, batch, ref, unit);
    return std::vector<diff::Var>(v.loss.begin(), v.loss.end());
  };
  std::vector<std::vector<double>> combos;
  for (const auto& row : rows) combos.emplace_back(row.weights.v.begin(), row.weights.v.end());
  const auto reports = diff::grad_check_combinations(segments, policy.params, combos, epsilon);

  LossGradReport out;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.rows.push_back(rows[i].name);
    out.errors.push_back(reports[i].max_relative_error);
    if (reports[i].max_relative_error >= out.max_error) {
      out.max_error = reports[i].max_relative_error;
      out.worst_row = rows[i].name;
      out.worst_param = reports[i].worst_param;
    }
  }

  // Policy and reference leaves in one graph; the reference enters the loss
  // only through the values of its log-probs.
  ParamSet joint = policy.params;
  for (const auto& p : reference.params) joint.add(ParamTensor{"ref." + p.name, p.shape, p.values});
  const std::size_t n = policy.params.size();
  const diff::Computation total = [&](diff::Graph& g, std::span<const diff::Var> leaves) {
    std::vector<lm::TokenSeq> contexts;
    for (const auto& pair : batch) contexts.push_back(seg::encode_prompt(pair.prompt));
    std::vector<lm::ScoredSeq> seqs;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      seqs.push_back({contexts[i], batch[i].chosen.tokens});
      seqs.push_back({contexts[i], batch[i].rejected.tokens});
    }
    const lm::BatchNll nll = lm::batch_nll(g, reference.config, leaves.subspan(n), seqs);
    const auto values = g.value(nll.nll);
    std::vector<loss::PairLogprobs> in_graph(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const seg::SegmentedResponse* sides[] = {&batch[i].chosen, &batch[i].rejected};
      loss::SegmentValues* dst[] = {&in_graph[i].chosen, &in_graph[i].rejected};
      for (int s = 0; s < 2; ++s)
        for (SegmentKind k : seg::kAllKinds) {
          const seg::Span span = sides[s]->spans.of(k);
          double acc = 0.0;
          for (std::size_t t = span.begin; t < span.end; ++t) acc += values[nll.offsets[2 * i + s] + t];
          (*dst[s])[k] = -acc;
        }
    }
    return loss::build_loss(g, policy.config, leaves.first(n), batch, in_graph, unit).total;
  };
  const diff::Evaluation eval = diff::evaluate_with_gradients(total, joint);
  for (std::size_t t = n; t < joint.size(); ++t)
    for (double v : eval.gradients[t].values) out.max_reference_grad = std::max(out.max_reference_grad, std::fabs(v));
  return out;
}

std::string gradcheck_json(const LossGradReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < r.rows.size(); ++i)
    rows.push_back({{"row", r.rows[i]}, {"max_relative_error", r.errors[i]}});
  return nlohmann::json{{"rows", rows},
                        {"max_relative_error", r.max_error},
                        {"worst_row", r.worst_row},
                        {"worst_param", r.worst_param},
                        {"max_reference_grad", r.max_reference_grad}}
      .dump(2);
}

}  // namespace hipo::verify
