// SPDX-License-Identifier: Apache-2.0
//
// Synthetic addition tasks with segmented preference pairs, and exact-match
// answer accuracy of sampled generations.
//
// Chosen response:
//   Rq  "Find 47+85.\n"
//   Mt  "ones 7+5=12, tens 4+8+1=13, hundreds 0+0+1=1.\n"
//   A   "Answer: 132\n"
// The rejected response follows the same template with one flaw.

#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "hipo/lm.hpp"
#include "hipo/segdata.hpp"

namespace hipo::synth {

enum class FlawMode { WrongStep, WrongFinal, OffTopic };

std::string_view to_string(FlawMode mode);

struct SynthTask {
  long long lhs = 0, rhs = 0;
  std::string query;  // "What is 47+85?"
  std::string correct_answer;
  std::string distractor_answer;
  FlawMode mode = FlawMode::WrongFinal;
};

// "Q: <query>\n"
std::string prompt_for(const SynthTask& task);

// Throws UsageError when n == 0 or max_operand < 2.
std::vector<SynthTask> gen_tasks(std::size_t n, std::uint64_t seed, long long max_operand);
seg::PreferencePair to_pair(const SynthTask& task);
std::vector<seg::PreferencePair> gen_dataset(std::size_t n, std::uint64_t seed,
                                             long long max_operand);

// The whitespace-delimited run after the last "Answer:", or "" without one.
std::string extract_answer(std::string_view generated);

struct EvalItem {
  std::string prompt;
  std::string generated;
  std::string extracted;
  std::string expected;
  bool correct = false;
};

struct EvalReport {
  std::size_t n_items = 0;
  std::size_t n_correct = 0;
  double accuracy = 0.0;
  std::vector<EvalItem> items;
};

inline constexpr double kEvalTemperature = 0.1;

// Item i is sampled with seed ^ i. Throws UsageError for an empty task list.
EvalReport eval_accuracy(const lm::Model& model, const std::vector<SynthTask>& tasks,
                         double temperature, std::uint64_t seed, std::size_t max_new = 64);

// Invalid UTF-8 in generated text is written as U+FFFD.
std::string report_json(const EvalReport& report);

}  // namespace hipo::synth
