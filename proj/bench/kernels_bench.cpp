// SPDX-License-Identifier: Apache-2.0
//
// Serial reference against OpenMP kernels at the shapes one training step of
// the default model uses (8 pairs, ~100 tokens, width 64).

#include <benchmark/benchmark.h>

#include <vector>

#include "hipo/kernels.hpp"
#include "hipo/lm.hpp"
#include "hipo/loss.hpp"
#include "hipo/rng.hpp"
#include "hipo/synth.hpp"

using namespace hipo;

namespace {

std::vector<double> random_values(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal(0.0, 1.0);
  return v;
}

template <auto Kernel>
void BM_matmul(benchmark::State& state) {
  const kernels::MatmulShape s{static_cast<std::size_t>(state.range(0)), static_cast<std::size_t>(state.range(1)),
                               static_cast<std::size_t>(state.range(2))};
  const auto a = random_values(s.n * s.k, 1), b = random_values(s.k * s.m, 2);
  std::vector<double> out(s.n * s.m);
  for (auto _ : state) {
    Kernel(a, b, out, s);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(s.n * s.k * s.m));
}

template <auto Forward>
void BM_attention(benchmark::State& state) {
  const kernels::AttentionShape s{16, static_cast<std::size_t>(state.range(0)), 2, 32};
  const auto qkv = random_values(s.rows() * 3 * s.width(), 3);
  std::vector<double> out(s.rows() * s.width()), probs(s.probs_size());
  for (auto _ : state) {
    Forward(qkv, out, probs, s);
    benchmark::DoNotOptimize(out.data());
  }
}

void BM_pair_logprobs(benchmark::State& state) {
  const lm::Model m = lm::init_model(lm::ModelConfig{});
  const auto pairs = synth::gen_dataset(8, 1, 99);
  for (auto _ : state) benchmark::DoNotOptimize(loss::pair_logprobs(m, pairs));
}

// Rows: 16 sequences x 96 positions; projections 64 -> 192 and the 64 -> 259 head.
#define MATMUL_ARGS Args({1536, 64, 192})->Args({1536, 64, 259})->Args({1536, 256, 64})

BENCHMARK(BM_matmul<kernels::serial::matmul>)->Name("matmul/serial")->MATMUL_ARGS;
BENCHMARK(BM_matmul<kernels::parallel::matmul>)->Name("matmul/parallel")->MATMUL_ARGS;
BENCHMARK(BM_attention<kernels::serial::attention_forward>)->Name("attention/serial")->Arg(48)->Arg(96);
BENCHMARK(BM_attention<kernels::parallel::attention_forward>)->Name("attention/parallel")->Arg(48)->Arg(96);
BENCHMARK(BM_pair_logprobs)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
