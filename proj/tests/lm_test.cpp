// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <numbers>
#include <vector>

#include "doctest.h"
#include "hipo/diff.hpp"
#include "hipo/error.hpp"
#include "hipo/lm.hpp"
#include "support.hpp"

using namespace hipo;

namespace {

constexpr double kLn2 = std::numbers::ln2;

// -log softmax(wte[prev] * head)[next] in extended precision.
long double bigram_nll(const lm::Model& m, int prev, int next) {
  const std::size_t V = m.config.vocab_size, C = m.config.embed_dim;
  const auto& wte = m.params.at("wte").values;
  const auto& head = m.params.at("head.w").values;
  std::vector<long double> logits(V, 0.0L);
  for (std::size_t v = 0; v < V; ++v)
    for (std::size_t c = 0; c < C; ++c)
      logits[v] += static_cast<long double>(wte[prev * C + c]) * head[c * V + v];
  long double mx = logits[0];
  for (auto l : logits) mx = std::max(mx, l);
  long double z = 0.0L;
  for (auto l : logits) z += std::exp(l - mx);
  return -(logits[next] - mx - std::log(z));
}

}  // namespace

TEST_CASE("byte tokenizer round trips") {
  CHECK(lm::tokenize("").empty());
  CHECK(lm::detokenize(lm::tokenize("")).empty());
  const auto ids = lm::tokenize("a+b");
  CHECK(ids == lm::TokenSeq{'a', '+', 'b'});
  CHECK(lm::detokenize(ids) == "a+b");

  Rng rng(1);
  std::string bytes(1024, '\0');
  for (auto& c : bytes) c = static_cast<char>(rng.below(256));
  CHECK(lm::detokenize(lm::tokenize(bytes)) == bytes);

  lm::TokenSeq with_controls{lm::kBos, 'h', 'i', lm::kEos, lm::kPad};
  CHECK(lm::detokenize(with_controls) == "hi");
  CHECK_THROWS_AS(lm::detokenize(lm::TokenSeq{'a', 259}), InvalidTokenError);
  CHECK_THROWS_AS(lm::detokenize(lm::TokenSeq{-1}), InvalidTokenError);
}

TEST_CASE("uniform vocab-2 model scores ln 2 per token") {
  const lm::Model m = testing::bigram(2, 1, {0.0, 0.0}, {0.0, 0.0});
  const lm::TokenSeq ctx{0}, y{1, 0, 1};
  const auto nll = lm::per_token_nll(m, ctx, y);
  REQUIRE(nll.values.size() == 3);
  for (double v : nll.values) CHECK(v == doctest::Approx(kLn2).epsilon(1e-15));
}

TEST_CASE("sequence log-prob") {
  CHECK(lm::sequence_logprob({{kLn2, kLn2, kLn2}}) == doctest::Approx(-2.0794415416798357));
  CHECK(lm::sequence_logprob({}) == 0.0);
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    lm::PerTokenNLL nll;
    long double exact = 0.0L;
    for (std::size_t i = 0, n = rng.between(1, 200); i < n; ++i) {
      nll.values.push_back(rng.uniform() * 10.0);
      exact += nll.values.back();
    }
    CHECK(std::abs(lm::sequence_logprob(nll) + static_cast<double>(exact)) < 1e-12);
  }
}

TEST_CASE("hand-set 3-token model matches direct softmax") {
  const lm::Model m =
      testing::bigram(3, 2, {0.5, -1.0, 2.0, 0.25, -0.75, 1.5}, {1.0, -2.0, 0.5, 0.3, 0.7, -1.1});
  const lm::TokenSeq ctx{2}, y{0, 1, 1, 2, 0};
  const auto nll = lm::per_token_nll(m, ctx, y);
  int prev = ctx.back();
  for (std::size_t i = 0; i < y.size(); ++i) {
    CHECK(std::abs(nll.values[i] - static_cast<double>(bigram_nll(m, prev, y[i]))) < 1e-10);
    CHECK(nll.values[i] >= 0.0);
    prev = y[i];
  }
}

TEST_CASE("sequences longer than the context are rejected") {
  lm::ModelConfig c = testing::small_config(1);
  c.context_length = 8;
  const lm::Model m = lm::init_model(c);
  const lm::TokenSeq ctx{lm::kBos, 'a', 'b'};
  const lm::TokenSeq fits(5, 'x'), too_long(6, 'x');
  CHECK(lm::per_token_nll(m, ctx, fits).values.size() == 5);
  CHECK_THROWS_AS(lm::per_token_nll(m, ctx, too_long), SequenceTooLongError);
  CHECK_THROWS_AS(lm::per_token_nll(m, ctx, lm::TokenSeq{}), UsageError);
}

TEST_CASE("softmax normalizes at every position") {
  const lm::Model m = lm::init_model(testing::small_config(3, 8, 1));
  const lm::TokenSeq ctx{lm::kBos, 'Q'};
  for (const lm::TokenSeq& prefix : {lm::TokenSeq{}, lm::TokenSeq{'a', 'b'}}) {
    double total = 0.0;
    for (int v = 0; v < static_cast<int>(m.config.vocab_size); ++v) {
      lm::TokenSeq y = prefix;
      y.push_back(v);
      total += std::exp(-lm::per_token_nll(m, ctx, y).values.back());
    }
    CHECK(std::abs(total - 1.0) < 1e-9);
  }
}

TEST_CASE("padding in a batch does not change a shorter sequence") {
  const lm::Model m = lm::init_model(testing::small_config(4, 16, 2));
  const lm::TokenSeq ctx{lm::kBos, 'Q', ':'}, short_y{'a', 'b', lm::kEos},
      long_y{'a', 'b', 'c', 'd', 'e', 'f', 'g', 'h', 'i'};
  const auto alone = lm::per_token_nll(m, ctx, short_y);
  diff::Graph g;
  std::vector<diff::Var> leaves;
  for (const auto& t : m.params) leaves.push_back(g.param(t, false));
  const lm::ScoredSeq batch[2] = {{ctx, long_y}, {ctx, short_y}};
  const auto b = lm::batch_nll(g, m.config, leaves, batch);
  const auto vals = g.value(b.nll);
  REQUIRE(b.offsets[2] - b.offsets[1] == short_y.size());
  for (std::size_t i = 0; i < short_y.size(); ++i)
    CHECK(vals[b.offsets[1] + i] == alone.values[i]);
}

TEST_CASE("sequence log-prob gradient passes the finite-difference check") {
  const lm::Model m = lm::init_model(testing::small_config(5, 8, 1));
  const lm::TokenSeq ctx{lm::kBos, '7'}, y{'+', '1', '=', '8'};
  const diff::Computation f = [&](diff::Graph& g, std::span<const diff::Var> x) {
    const lm::ScoredSeq s{ctx, y};
    const auto b = lm::batch_nll(g, m.config, x, std::span(&s, 1));
    return g.scale(g.range_sum(b.nll, 0, y.size()), -1.0);
  };
  CHECK(diff::grad_check(f, m.params, 1e-5) < 1e-4);
}

TEST_CASE("generation is deterministic") {
  const lm::Model m = lm::init_model(testing::small_config(6));
  const lm::TokenSeq prompt = lm::tokenize("Q: What is 1+2?\n");
  CHECK(lm::generate(m, prompt, 0.0, 1, 12) == lm::generate(m, prompt, 0.0, 99, 12));
  CHECK(lm::generate(m, prompt, 0.1, 5, 12) == lm::generate(m, prompt, 0.1, 5, 12));
  CHECK(lm::generate(m, prompt, 1.0, 5, 12).size() <= 12);
}

TEST_CASE("greedy ties go to the lowest id") {
  const lm::Model m = testing::bigram(3, 1, {1.0, 1.0, 1.0}, {0.0, 0.0, 0.0});
  CHECK(lm::generate(m, lm::TokenSeq{2}, 0.0, 0, 3) == lm::TokenSeq{0, 0, 0});
}

TEST_CASE("a token with 0.99 mass dominates at temperature 0.1") {
  // softmax([0, ln 99]) = [0.01, 0.99]; at temperature 0.1 token 1 has
  // probability 1 / (1 + 99^-10).
  const lm::Model m = testing::bigram(2, 1, {1.0, 1.0}, {0.0, std::log(99.0)});
  const auto probs = std::exp(-lm::per_token_nll(m, lm::TokenSeq{0}, lm::TokenSeq{1}).values[0]);
  CHECK(probs == doctest::Approx(0.99).epsilon(1e-12));
  int hits = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed)
    hits += lm::generate(m, lm::TokenSeq{0}, 0.1, seed, 1) == lm::TokenSeq{1};
  CHECK(hits >= 990);
}
