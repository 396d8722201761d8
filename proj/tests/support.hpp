// SPDX-License-Identifier: Apache-2.0
//
// Helpers shared by the unit tests and the acceptance harness.

#pragma once

#include <unistd.h>

#include <atomic>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "hipo/lm.hpp"
#include "hipo/rng.hpp"
#include "hipo/segdata.hpp"

namespace hipo::testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("hipo-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string random_text(Rng& rng, std::size_t min_len, std::size_t max_len) {
  static constexpr char kAlphabet[] = "abcdefghijklmnopqrstuvwxyz0123456789 +-=.:?\n";
  const auto n = static_cast<std::size_t>(
      rng.between(static_cast<long long>(min_len), static_cast<long long>(max_len)));
  std::string s;
  for (std::size_t i = 0; i < n; ++i) s += kAlphabet[rng.below(sizeof(kAlphabet) - 1)];
  return s;
}

inline seg::PreferencePair random_pair(Rng& rng, std::size_t max_segment = 6) {
  for (;;) {
    auto response = [&] {
      return seg::make_response(random_text(rng, 1, max_segment), random_text(rng, 1, max_segment),
                                random_text(rng, 1, max_segment));
    };
    auto chosen = response();
    auto rejected = response();
    if (chosen.tokens == rejected.tokens) continue;
    return seg::make_pair(random_text(rng, 1, 8), std::move(chosen), std::move(rejected));
  }
}

inline std::vector<seg::PreferencePair> random_pairs(Rng& rng, std::size_t n,
                                                     std::size_t max_segment = 6) {
  std::vector<seg::PreferencePair> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(random_pair(rng, max_segment));
  return out;
}

// Small transformer that still fits every synthetic pair.
inline lm::ModelConfig small_config(std::uint64_t seed, std::size_t embed = 16,
                                    std::size_t layers = 1) {
  lm::ModelConfig c;
  c.embed_dim = embed;
  c.n_layers = layers;
  c.n_heads = 2;
  c.context_length = 96;
  c.seed = seed;
  return c;
}

// Bigram model with explicit tables: logits(prev) = wte[prev] * head.
inline lm::Model bigram(std::size_t vocab, std::size_t dim, const std::vector<double>& wte,
                        const std::vector<double>& head, std::size_t context = 8) {
  lm::ModelConfig c;
  c.vocab_size = vocab;
  c.embed_dim = dim;
  c.n_layers = 0;
  c.n_heads = 1;
  c.context_length = context;
  lm::Model m{c, {}};
  m.params.add(ParamTensor{"wte", {vocab, dim}, wte});
  m.params.add(ParamTensor{"head.w", {dim, vocab}, head});
  return m;
}

inline lm::Model random_bigram(Rng& rng, std::size_t vocab, std::size_t dim, double scale) {
  std::vector<double> wte(vocab * dim), head(dim * vocab);
  for (auto& v : wte) v = rng.normal(0.0, scale);
  for (auto& v : head) v = rng.normal(0.0, scale);
  return bigram(vocab, dim, wte, head);
}

}  // namespace hipo::testing
