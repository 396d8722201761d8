// SPDX-License-Identifier: Apache-2.0

#include "hipo/synth.hpp"

#include <algorithm>
#include <cctype>

#include "hipo/error.hpp"
#include "hipo/rng.hpp"
#include "json.hpp"

namespace hipo::synth {

namespace {

constexpr std::string_view kMarker = "Answer:";
constexpr const char* kPlaces[] = {"ones", "tens", "hundreds", "thousands"};

std::string place_name(std::size_t i) {
  if (i < std::size(kPlaces)) return kPlaces[i];
  return "10^" + std::to_string(i);
}

// Column-by-column addition. A nonzero `bump` silently misadds the ones column
// and the later columns carry the mistake forward.
std::string digit_steps(long long lhs, long long rhs, int bump) {
  std::string out;
  int carry = 0;
  for (std::size_t place = 0; lhs > 0 || rhs > 0 || carry > 0 || place == 0; ++place) {
    const int x = static_cast<int>(lhs % 10);
    const int y = static_cast<int>(rhs % 10);
    lhs /= 10;
    rhs /= 10;
    const int s = x + y + carry + (place == 0 ? bump : 0);
    if (!out.empty()) out += ", ";
    out += place_name(place) + " " + std::to_string(x) + "+" + std::to_string(y);
    if (carry) out += "+1";
    out += "=" + std::to_string(s);
    carry = s / 10;
  }
  return out + ".\n";
}

std::string answer_line(const std::string& value) { return std::string(kMarker) + " " + value + "\n"; }

std::string restate(const SynthTask& t) {
  return "Find " + std::to_string(t.lhs) + "+" + std::to_string(t.rhs) + ".\n";
}

}  // namespace

std::string_view to_string(FlawMode mode) {
  switch (mode) {
    case FlawMode::WrongStep: return "wrong-step";
    case FlawMode::WrongFinal: return "wrong-final";
    case FlawMode::OffTopic: return "off-topic";
  }
  return "?";
}

std::string prompt_for(const SynthTask& task) { return "Q: " + task.query + "\n"; }

std::vector<SynthTask> gen_tasks(std::size_t n, std::uint64_t seed, long long max_operand) {
  if (n == 0) throw UsageError("gen_dataset: n must be positive");
  if (max_operand < 2) throw UsageError("gen_dataset: max_operand must be at least 2");
  Rng rng(seed);
  std::vector<SynthTask> tasks;
  tasks.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    SynthTask t;
    t.lhs = rng.between(0, max_operand);
    t.rhs = rng.between(0, max_operand);
    t.mode = static_cast<FlawMode>(rng.below(3));
    const long long sum = t.lhs + t.rhs;
    // Off by 1..3, never negative.
    long long offset = rng.between(1, 3);
    if (t.mode != FlawMode::WrongStep && rng.below(2) == 1 && sum - offset >= 0) offset = -offset;
    t.query = "What is " + std::to_string(t.lhs) + "+" + std::to_string(t.rhs) + "?";
    t.correct_answer = std::to_string(sum);
    t.distractor_answer = std::to_string(sum + offset);
    tasks.push_back(std::move(t));
  }
  return tasks;
}

seg::PreferencePair to_pair(const SynthTask& t) {
  const std::string rq = restate(t);
  auto chosen = seg::make_response(rq, digit_steps(t.lhs, t.rhs, 0), answer_line(t.correct_answer));
  seg::SegmentedResponse rejected;
  switch (t.mode) {
    case FlawMode::WrongStep: {
      const int bump = static_cast<int>(std::stoll(t.distractor_answer) - std::stoll(t.correct_answer));
      rejected = seg::make_response(rq, digit_steps(t.lhs, t.rhs, bump),
                                    answer_line(t.distractor_answer));
      break;
    }
    case FlawMode::WrongFinal:
      rejected = seg::make_response(rq, digit_steps(t.lhs, t.rhs, 0),
                                    answer_line(t.distractor_answer));
      break;
    case FlawMode::OffTopic:
      rejected = seg::make_response("Talk about numbers.\n", "Numbers can be listed.\n",
                                    answer_line(t.distractor_answer));
      break;
  }
  return seg::make_pair(prompt_for(t), std::move(chosen), std::move(rejected));
}

std::vector<seg::PreferencePair> gen_dataset(std::size_t n, std::uint64_t seed,
                                             long long max_operand) {
  std::vector<seg::PreferencePair> pairs;
  for (const auto& t : gen_tasks(n, seed, max_operand)) pairs.push_back(to_pair(t));
  return pairs;
}

std::string extract_answer(std::string_view text) {
  const std::size_t at = text.rfind(kMarker);
  if (at == std::string_view::npos) return {};
  std::size_t i = at + kMarker.size();
  auto space = [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; };
  while (i < text.size() && space(text[i])) ++i;
  std::size_t j = i;
  while (j < text.size() && !space(text[j])) ++j;
  return std::string(text.substr(i, j - i));
}

EvalReport eval_accuracy(const lm::Model& model, const std::vector<SynthTask>& tasks,
                         double temperature, std::uint64_t seed, std::size_t max_new) {
  if (tasks.empty()) throw UsageError("eval_accuracy: no tasks");
  if (!(temperature >= 0.0)) throw UsageError("temperature must be non-negative");
  EvalReport report;
  report.n_items = tasks.size();
  report.items.resize(tasks.size());
  const auto n = static_cast<std::ptrdiff_t>(tasks.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const SynthTask& t = tasks[static_cast<std::size_t>(i)];
    EvalItem& item = report.items[static_cast<std::size_t>(i)];
    item.prompt = prompt_for(t);
    const lm::TokenSeq z = seg::encode_prompt(item.prompt);
    const lm::TokenSeq out =
        lm::generate(model, z, temperature, seed ^ static_cast<std::uint64_t>(i), max_new);
    item.generated = lm::detokenize(out);
    item.extracted = extract_answer(item.generated);
    item.expected = t.correct_answer;
    item.correct = item.extracted == item.expected;
  }
  report.n_correct = static_cast<std::size_t>(
      std::count_if(report.items.begin(), report.items.end(), [](const EvalItem& e) { return e.correct; }));
  report.accuracy = static_cast<double>(report.n_correct) / static_cast<double>(report.n_items);
  return report;
}

std::string report_json(const EvalReport& r) {
  nlohmann::json items = nlohmann::json::array();
  for (const auto& e : r.items)
    items.push_back({{"prompt", e.prompt},
                     {"generated", e.generated},
                     {"extracted", e.extracted},
                     {"expected", e.expected},
                     {"correct", e.correct}});
  return nlohmann::json{{"n_items", r.n_items},
                        {"n_correct", r.n_correct},
                        {"accuracy", r.accuracy},
                        {"items", items}}
             .dump(2, ' ', false, nlohmann::json::error_handler_t::replace) +
         "\n";
}

}  // namespace hipo::synth
