// SPDX-License-Identifier: Apache-2.0
//
// Tiny causal language model over a byte-level vocabulary.
//
// Two architectures share one parameter layout scheme:
//  * n_layers > 0: pre-norm transformer (token + learned position embeddings,
//    causal multi-head attention, GELU MLP, final layer norm, untied head);
//  * n_layers == 0: embedding-bigram model, logits = wte[prev] * head.
// The bigram mode exists so brute-force oracles can enumerate the model.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hipo/diff.hpp"
#include "hipo/params.hpp"

namespace hipo::lm {

inline constexpr int kBos = 256;
inline constexpr int kEos = 257;
inline constexpr int kPad = 258;
inline constexpr std::size_t kByteVocabSize = 259;

struct Vocab {
  std::size_t size = kByteVocabSize;
  bool is_control(int id) const { return id >= 256; }
};

using TokenSeq = std::vector<int>;

TokenSeq tokenize(std::string_view text);
// Control tokens (BOS/EOS/PAD) are dropped. Throws InvalidTokenError for ids
// outside the vocabulary.
std::string detokenize(std::span<const int> ids, const Vocab& vocab = {});

struct ModelConfig {
  std::size_t vocab_size = kByteVocabSize;
  std::size_t context_length = 128;
  std::size_t embed_dim = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::uint64_t seed = 0;

  // Throws UsageError when the invariants do not hold.
  void validate() const;
  std::size_t pad_id() const { return vocab_size > kPad ? kPad : 0; }
  bool has_eos() const { return vocab_size > kEos; }
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct Model {
  ModelConfig config;
  ParamSet params;
};

// Parameter names and shapes in canonical order.
std::vector<std::pair<std::string, std::vector<std::size_t>>> param_layout(
    const ModelConfig& config);

// Throws DataError unless params follow param_layout(config) exactly.
void check_params(const ModelConfig& config, const ParamSet& params);

// Seeded N(0, 0.02) weights, zero biases, unit layer-norm gains; values are
// rounded to f32.
Model init_model(const ModelConfig& config);

// One teacher-forced sequence: the model reads context ‖ response[:-1] and is
// scored on every response token.
struct ScoredSeq {
  std::span<const int> context;
  std::span<const int> response;
};

// Per-token NLL column for a right-padded batch. Sequence s owns rows
// [offsets[s], offsets[s + 1]) of `nll`, one row per response token.
struct BatchNll {
  diff::Var nll;
  std::vector<std::size_t> offsets;
};

// Throws SequenceTooLongError when |context| + |response| > context_length and
// UsageError for an empty context or response.
BatchNll batch_nll(diff::Graph& graph, const ModelConfig& config,
                   std::span<const diff::Var> params, std::span<const ScoredSeq> batch);

struct PerTokenNLL {
  std::vector<double> values;
};

PerTokenNLL per_token_nll(const Model& model, std::span<const int> context,
                          std::span<const int> response);

// log pi(y | z) = -sum(values), summed index-ascending.
double sequence_logprob(const PerTokenNLL& nll);

// Logits for the token following `tokens`.
std::vector<double> next_token_logits(const Model& model, std::span<const int> tokens);

// temperature == 0: greedy, ties to the lowest id. Otherwise samples from
// softmax(logits / temperature). Stops at EOS (not included in the output),
// after max_new tokens, or when the context is full.
TokenSeq generate(const Model& model, std::span<const int> prompt, double temperature,
                  std::uint64_t seed, std::size_t max_new);

}  // namespace hipo::lm
