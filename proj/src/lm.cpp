// SPDX-License-Identifier: Apache-2.0

#include "hipo/lm.hpp"

#include <algorithm>
#include <cmath>

#include "hipo/error.hpp"
#include "hipo/rng.hpp"

namespace hipo::lm {

namespace {

constexpr double kInitStd = 0.02;
constexpr std::size_t kPerLayer = 11;

// Offsets into the canonical layout.
struct Bound {
  diff::Var wte, wpe, lnf_g, lnf_b, head;
  struct Layer {
    diff::Var ln1_g, ln1_b, qkv_w, proj_w, proj_b, ln2_g, ln2_b, fc_w, fc_b, mproj_w, mproj_b;
  };
  std::vector<Layer> layers;
};

Bound bind_params(const ModelConfig& cfg, std::span<const diff::Var> p) {
  const std::size_t expected =
      cfg.n_layers == 0 ? 2 : 2 + kPerLayer * cfg.n_layers + 2 + 1;
  if (p.size() != expected) throw UsageError("parameter count does not match model config");
  Bound b;
  std::size_t i = 0;
  b.wte = p[i++];
  if (cfg.n_layers > 0) b.wpe = p[i++];
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    Bound::Layer layer{p[i], p[i + 1], p[i + 2], p[i + 3], p[i + 4], p[i + 5],
                       p[i + 6], p[i + 7], p[i + 8], p[i + 9], p[i + 10]};
    b.layers.push_back(layer);
    i += kPerLayer;
  }
  if (cfg.n_layers > 0) {
    b.lnf_g = p[i++];
    b.lnf_b = p[i++];
  }
  b.head = p[i++];
  return b;
}

// Final hidden states (before the head) for a right-padded [batch, seq_len]
// block of token ids. Final layer norm is applied to the selected rows only.
diff::Var trunk(diff::Graph& g, const ModelConfig& cfg, const Bound& b,
                std::span<const int> ids, std::size_t batch, std::size_t seq_len) {
  diff::Var x = g.gather_rows(b.wte, ids);
  if (cfg.n_layers == 0) return x;
  std::vector<int> positions(ids.size());
  for (std::size_t r = 0; r < ids.size(); ++r) positions[r] = static_cast<int>(r % seq_len);
  x = g.add(x, g.gather_rows(b.wpe, positions));
  for (const auto& layer : b.layers) {
    const diff::Var h = g.layer_norm(x, layer.ln1_g, layer.ln1_b);
    const diff::Var attn = g.causal_attention(g.matmul(h, layer.qkv_w), batch, seq_len,
                                              cfg.n_heads);
    x = g.add(x, g.add_row(g.matmul(attn, layer.proj_w), layer.proj_b));
    const diff::Var h2 = g.layer_norm(x, layer.ln2_g, layer.ln2_b);
    const diff::Var f = g.gelu(g.add_row(g.matmul(h2, layer.fc_w), layer.fc_b));
    x = g.add(x, g.add_row(g.matmul(f, layer.mproj_w), layer.mproj_b));
  }
  return x;
}

diff::Var head_logits(diff::Graph& g, const ModelConfig& cfg, const Bound& b, diff::Var hidden,
                      std::span<const std::size_t> rows) {
  diff::Var h = g.select_rows(hidden, rows);
  if (cfg.n_layers > 0) h = g.layer_norm(h, b.lnf_g, b.lnf_b);
  return g.matmul(h, b.head);
}

void check_ids(std::span<const int> ids, std::size_t vocab) {
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) throw InvalidTokenError(id, vocab);
}

void add_leaves(diff::Graph& g, std::vector<diff::Var>& vars, const Model& model) {
  check_params(model.config, model.params);
  vars.reserve(model.params.size());
  for (const auto& p : model.params) vars.push_back(g.param(p, false));
}

}  // namespace

TokenSeq tokenize(std::string_view text) {
  TokenSeq ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(c);
  return ids;
}

std::string detokenize(std::span<const int> ids, const Vocab& vocab) {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab.size)
      throw InvalidTokenError(id, vocab.size);
    if (!vocab.is_control(id)) out.push_back(static_cast<char>(id));
  }
  return out;
}

void ModelConfig::validate() const {
  if (vocab_size < 2) throw UsageError("vocab_size must be at least 2");
  if (context_length < 2) throw UsageError("context_length must be at least 2");
  if (embed_dim == 0 || n_heads == 0) throw UsageError("embed_dim and n_heads must be positive");
  if (embed_dim % n_heads != 0) throw UsageError("embed_dim must be divisible by n_heads");
}

std::vector<std::pair<std::string, std::vector<std::size_t>>> param_layout(
    const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t c = cfg.embed_dim;
  std::vector<std::pair<std::string, std::vector<std::size_t>>> layout;
  layout.push_back({"wte", {cfg.vocab_size, c}});
  if (cfg.n_layers > 0) layout.push_back({"wpe", {cfg.context_length, c}});
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    layout.push_back({p + "ln1.g", {c}});
    layout.push_back({p + "ln1.b", {c}});
    layout.push_back({p + "attn.qkv.w", {c, 3 * c}});
    layout.push_back({p + "attn.proj.w", {c, c}});
    layout.push_back({p + "attn.proj.b", {c}});
    layout.push_back({p + "ln2.g", {c}});
    layout.push_back({p + "ln2.b", {c}});
    layout.push_back({p + "mlp.fc.w", {c, 4 * c}});
    layout.push_back({p + "mlp.fc.b", {4 * c}});
    layout.push_back({p + "mlp.proj.w", {4 * c, c}});
    layout.push_back({p + "mlp.proj.b", {c}});
  }
  if (cfg.n_layers > 0) {
    layout.push_back({"lnf.g", {c}});
    layout.push_back({"lnf.b", {c}});
  }
  layout.push_back({"head.w", {c, cfg.vocab_size}});
  return layout;
}

void check_params(const ModelConfig& config, const ParamSet& params) {
  const auto layout = param_layout(config);
  bool ok = layout.size() == params.size();
  for (std::size_t i = 0; ok && i < layout.size(); ++i)
    ok = params[i].name == layout[i].first && params[i].shape == layout[i].second;
  if (!ok) throw DataError("parameters do not match the model configuration");
}

Model init_model(const ModelConfig& config) {
  Model model{config, {}};
  Rng rng(config.seed);
  for (auto& [name, shape] : param_layout(config)) {
    std::vector<double> values(shape_product(shape), 0.0);
    const bool is_gain = name.ends_with(".g");
    const bool is_bias = name.ends_with(".b");
    if (is_gain) {
      std::fill(values.begin(), values.end(), 1.0);
    } else if (!is_bias) {
      for (double& v : values) v = rng.normal(0.0, kInitStd);
    }
    model.params.add(ParamTensor{name, shape, std::move(values)});
  }
  round_to_f32(model.params);
  return model;
}

BatchNll batch_nll(diff::Graph& g, const ModelConfig& cfg, std::span<const diff::Var> params,
                   std::span<const ScoredSeq> batch) {
  if (batch.empty()) throw UsageError("batch_nll: empty batch");
  const Bound b = bind_params(cfg, params);
  std::size_t seq_len = 0;
  for (const auto& s : batch) {
    if (s.context.empty()) throw UsageError("per-token NLL needs a non-empty context");
    if (s.response.empty()) throw UsageError("per-token NLL needs a non-empty response");
    const std::size_t total = s.context.size() + s.response.size();
    if (total > cfg.context_length) throw SequenceTooLongError(total, cfg.context_length);
    check_ids(s.context, cfg.vocab_size);
    check_ids(s.response, cfg.vocab_size);
    seq_len = std::max(seq_len, total - 1);
  }

  std::vector<int> ids(batch.size() * seq_len, static_cast<int>(cfg.pad_id()));
  std::vector<std::size_t> rows;
  std::vector<int> targets;
  BatchNll out;
  out.offsets.push_back(0);
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const auto& seq = batch[s];
    int* row = ids.data() + s * seq_len;
    std::copy(seq.context.begin(), seq.context.end(), row);
    std::copy(seq.response.begin(), seq.response.end() - 1, row + seq.context.size());
    for (std::size_t i = 0; i < seq.response.size(); ++i) {
      rows.push_back(s * seq_len + seq.context.size() - 1 + i);
      targets.push_back(seq.response[i]);
    }
    out.offsets.push_back(rows.size());
  }

  const diff::Var hidden = trunk(g, cfg, b, ids, batch.size(), seq_len);
  const diff::Var logp = g.log_softmax(head_logits(g, cfg, b, hidden, rows));
  out.nll = g.neg(g.pick(logp, targets));
  return out;
}

PerTokenNLL per_token_nll(const Model& model, std::span<const int> context,
                          std::span<const int> response) {
  diff::Graph g;
  std::vector<diff::Var> vars;
  add_leaves(g, vars, model);
  const ScoredSeq seq{context, response};
  const BatchNll nll = batch_nll(g, model.config, vars, {&seq, 1});
  const auto values = g.value(nll.nll);
  return PerTokenNLL{{values.begin(), values.end()}};
}

double sequence_logprob(const PerTokenNLL& nll) {
  double total = 0.0;
  for (double v : nll.values) total += v;
  return -total;
}

std::vector<double> next_token_logits(const Model& model, std::span<const int> tokens) {
  const ModelConfig& cfg = model.config;
  if (tokens.empty()) throw UsageError("next_token_logits: empty input");
  if (tokens.size() > cfg.context_length)
    throw SequenceTooLongError(tokens.size(), cfg.context_length);
  check_ids(tokens, cfg.vocab_size);
  diff::Graph g;
  std::vector<diff::Var> vars;
  add_leaves(g, vars, model);
  const Bound b = bind_params(cfg, vars);
  const diff::Var hidden = trunk(g, cfg, b, tokens, 1, tokens.size());
  const std::size_t last = tokens.size() - 1;
  const auto logits = g.value(head_logits(g, cfg, b, hidden, {&last, 1}));
  return {logits.begin(), logits.end()};
}

TokenSeq generate(const Model& model, std::span<const int> prompt, double temperature,
                  std::uint64_t seed, std::size_t max_new) {
  if (!(temperature >= 0.0)) throw UsageError("generate: temperature must be >= 0");
  const ModelConfig& cfg = model.config;
  if (prompt.empty()) throw UsageError("generate: empty prompt");
  if (prompt.size() > cfg.context_length)
    throw SequenceTooLongError(prompt.size(), cfg.context_length);
  Rng rng(seed);
  TokenSeq tokens(prompt.begin(), prompt.end());
  TokenSeq generated;
  std::vector<double> probs(cfg.vocab_size);
  while (generated.size() < max_new && tokens.size() < cfg.context_length) {
    const std::vector<double> logits = next_token_logits(model, tokens);
    int next = 0;
    if (temperature == 0.0) {
      for (std::size_t v = 1; v < logits.size(); ++v)
        if (logits[v] > logits[next]) next = static_cast<int>(v);
    } else {
      double max_v = logits[0];
      for (double l : logits) max_v = std::max(max_v, l);
      double total = 0.0;
      for (std::size_t v = 0; v < logits.size(); ++v) {
        probs[v] = std::exp((logits[v] - max_v) / temperature);
        total += probs[v];
      }
      const double u = rng.uniform() * total;
      double cumulative = 0.0;
      next = static_cast<int>(logits.size() - 1);
      for (std::size_t v = 0; v < logits.size(); ++v) {
        cumulative += probs[v];
        if (u < cumulative) {
          next = static_cast<int>(v);
          break;
        }
      }
    }
    if (cfg.has_eos() && next == kEos) break;
    generated.push_back(next);
    tokens.push_back(next);
  }
  return generated;
}

}  // namespace hipo::lm
