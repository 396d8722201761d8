// SPDX-License-Identifier: Apache-2.0

#include "hipo/llm.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <optional>
#include <regex>
#include <thread>

#include "httplib.h"
#include "json.hpp"

namespace hipo::llm {

namespace {

using nlohmann::json;

constexpr std::string_view kAugmentTemplate =
    "You are given a dataset of instructions, two model outputs (output_a and output_b).\n"
    "\n"
    "Your task is to rewrite both outputs into the following cognitive structure:\n"
    "\n"
    "1. Refined Query (R_q) --- Rewrite the original query into an elaborate one that contains "
    "more explanations or context for answering the original query.\n"
    "\n"
    "2. Meta-Thinking (M_t) --- Provide structured reasoning steps that logically lead to the "
    "answer.\n"
    "\n"
    "3. Refined Answer (A) --- Give the final, polished response that directly addresses the "
    "query, based on M_t.\n"
    "\n"
    "Format your response strictly as JSON with the following structure:\n"
    "\n"
    "{\"output_a\": {\"refined_query\": \"...\", \"meta_thinking\": \"...\", "
    "\"refined_answer\": \"...\"},\n"
    "\"output_b\": {\"refined_query\": \"...\", \"meta_thinking\": \"...\", "
    "\"refined_answer\": \"...\"}}\n"
    "\n"
    "Maintain the preference relationship: if output_a was originally preferred, ensure your "
    "rewritten output_a remains of higher quality than output_b. Do not add any text before or "
    "after the JSON.\n";

constexpr std::string_view kJudgeTemplate =
    "You are an expert evaluator of mathematical reasoning. Given a problem and a model "
    "response, evaluate the response on the following criteria, each scored 0--10:\n"
    "\n"
    "Coherence: Logical flow, structural organization, consistency.\n"
    "\n"
    "Accuracy: Factual correctness, domain knowledge application, reasoning validity, final "
    "answer correctness.\n"
    "\n"
    "Goal Completion: Strategy usefulness, progress toward solution, partial success "
    "recognition, error robustness.\n"
    "\n"
    "Return a JSON object: {\"coherence\": {...}, \"accuracy\": {...}, \"goal_completion\": "
    "{...}}\n";

std::string judge_keys_line() {
  std::string line = "Use these keys:";
  const char* group = "";
  for (const auto& axis : kAxisNames) {
    if (std::string_view(group) != axis.group) {
      line += std::string(*group ? "; " : " ") + axis.group + ":";
      group = axis.group;
    } else {
      line += ",";
    }
    line += std::string(" ") + axis.key;
  }
  return line + ".\n";
}

std::optional<json> parse_object(std::string_view reply) {
  try {
    json doc = json::parse(reply);
    if (doc.is_object()) return doc;
  } catch (const json::parse_error&) {
  }
  return std::nullopt;
}

std::string string_field(const json& obj, const std::string& group, const char* key) {
  const std::string path = group + "." + key;
  if (!obj.contains(key) || !obj[key].is_string()) throw SchemaError(path);
  std::string value = obj[key].get<std::string>();
  if (value.empty()) throw EmptySegmentError(path);
  return value;
}

Segments segments_at(const json& doc, const std::string& group) {
  if (!doc.contains(group) || !doc[group].is_object()) throw SchemaError(group);
  const json& obj = doc[group];
  return Segments{string_field(obj, group, "refined_query"),
                  string_field(obj, group, "meta_thinking"),
                  string_field(obj, group, "refined_answer")};
}

std::string with_separator(std::string text) {
  if (!text.ends_with('\n')) text += "\n\n";
  return text;
}

seg::SegmentedResponse response_from(const Segments& s) {
  return seg::make_response(with_separator(s.refined_query), with_separator(s.meta_thinking),
                            s.refined_answer);
}

// Retryable failure: transport, throttling, server error, or a malformed reply
// envelope.
struct Transient {
  std::string what;
  int status;
};

}  // namespace

EndpointConfig EndpointConfig::from_env() {
  EndpointConfig c;
  const char* url = std::getenv("HIPO_LLM_ENDPOINT");
  if (!url || !*url) throw UsageError("HIPO_LLM_ENDPOINT is not set");
  c.url = url;
  if (const char* m = std::getenv("HIPO_LLM_MODEL")) c.model = m;
  if (const char* k = std::getenv("HIPO_LLM_KEY")) c.api_key = k;
  return c;
}

std::string augment_prompt(const AugmentInput& in) {
  std::string p(kAugmentTemplate);
  p += "\nInstruction:\n" + in.instruction + "\n";
  p += "\noutput_a:\n" + in.output_a + "\n";
  p += "\noutput_b:\n" + in.output_b + "\n";
  p += std::string("\nOriginally preferred: ") +
       (in.preferred == Preferred::A ? "output_a" : "output_b") + "\n";
  return p;
}

std::string judge_prompt(const JudgeInput& in) {
  std::string p(kJudgeTemplate);
  p += "\n" + judge_keys_line();
  p += "\nProblem:\n" + in.problem + "\n";
  p += "\nResponse:\n" + in.response + "\n";
  return p;
}

std::string request_body(std::string_view model, std::string_view prompt, double temperature) {
  const json body{{"model", model},
                  {"messages", json::array({json{{"role", "user"}, {"content", prompt}}})},
                  {"temperature", temperature}};
  return body.dump();
}

AugmentedRecord parse_augment_reply(std::string_view reply) {
  const auto doc = parse_object(reply);
  if (!doc) throw AugmentParseError("augmentation reply is not a JSON object", std::string(reply));
  return AugmentedRecord{segments_at(*doc, "output_a"), segments_at(*doc, "output_b")};
}

seg::PreferencePair to_preference_pair(const AugmentedRecord& record, const AugmentInput& input) {
  const bool a_wins = input.preferred == Preferred::A;
  return seg::make_pair(input.instruction, response_from(a_wins ? record.output_a : record.output_b),
                        response_from(a_wins ? record.output_b : record.output_a));
}

JudgeScores parse_judge_reply(std::string_view reply) {
  const auto doc = parse_object(reply);
  if (!doc) throw ReplyParseError("judge reply is not a JSON object", std::string(reply));
  JudgeScores scores;
  for (std::size_t i = 0; i < kAxes; ++i) {
    const auto& [group, key] = kAxisNames[i];
    if (!doc->contains(group) || !(*doc)[group].is_object()) throw SchemaError(group);
    const json& g = (*doc)[group];
    const std::string path = std::string(group) + "." + key;
    if (!g.contains(key) || !g[key].is_number()) throw SchemaError(path);
    const double v = g[key].get<double>();
    if (!(v >= 0.0 && v <= 10.0))
      throw RangeError("score " + path + " = " + g[key].dump() + " outside [0, 10]");
    scores.values[i] = v;
  }
  return scores;
}

std::string scores_json(const JudgeScores& scores) {
  json out = json::object();
  for (std::size_t i = 0; i < kAxes; ++i)
    out[kAxisNames[i].group][kAxisNames[i].key] = scores.values[i];
  return out.dump();
}

RadarSummary aggregate_scores(std::span<const JudgeScores> scores) {
  if (scores.empty()) throw EmptySetError();
  RadarSummary summary;
  summary.count = scores.size();
  for (std::size_t i = 0; i < kAxes; ++i) {
    double acc = 0.0;
    for (const auto& s : scores) acc += s.values[i];
    summary.means[i] = acc / static_cast<double>(scores.size());
  }
  return summary;
}

std::string radar_json(const RadarSummary& summary) {
  json axes = json::array();
  json means = json::object();
  for (std::size_t i = 0; i < kAxes; ++i) {
    axes.push_back(kAxisNames[i].key);
    means[kAxisNames[i].key] = summary.means[i];
  }
  return json{{"axes", axes}, {"means", means}, {"count", summary.count}}.dump(2) + "\n";
}

Client::Client(EndpointConfig config)
    : config_(std::move(config)),
      in_flight_(static_cast<std::ptrdiff_t>(std::clamp<std::size_t>(config_.max_in_flight, 1, 1024))) {
  static const std::regex kUrl(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(config_.url, m, kUrl))
    throw UsageError("endpoint URL must look like http(s)://host[:port]/path: " + config_.url);
  origin_ = m[1].str();
  path_ = m[2].matched ? m[2].str() : "/v1/chat/completions";
  if (config_.max_attempts == 0) throw UsageError("max_attempts must be positive");
}

void Client::backoff(std::size_t attempt) const {
  const double seconds = config_.backoff_base_seconds * std::ldexp(1.0, static_cast<int>(attempt));
  std::this_thread::sleep_for(std::chrono::duration<double>(seconds));
}

template <class T, class Parse>
T Client::request_parsed(const std::string& prompt, double temperature, Parse parse) const {
  const std::string body = request_body(config_.model, prompt, temperature);
  std::optional<Transient> last_transient;
  std::exception_ptr last_parse;
  for (std::size_t attempt = 0; attempt < config_.max_attempts; ++attempt) {
    if (attempt > 0) backoff(attempt - 1);
    std::string content;
    {
      in_flight_.acquire();
      struct Release {
        std::counting_semaphore<1024>& s;
        ~Release() { s.release(); }
      } release{in_flight_};

      httplib::Client http(origin_);
      const auto timeout = std::chrono::duration<double>(config_.timeout_seconds);
      http.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
      http.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
      httplib::Headers headers;
      if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);
      const auto res = http.Post(path_, headers, body, "application/json");
      if (!res) {
        last_transient = Transient{"transport failure: " + httplib::to_string(res.error()), 0};
        continue;
      }
      if (res->status == 429 || res->status >= 500) {
        last_transient = Transient{"endpoint returned HTTP " + std::to_string(res->status), res->status};
        continue;
      }
      if (res->status < 200 || res->status >= 300)
        throw EndpointError("endpoint returned HTTP " + std::to_string(res->status), res->status);
      const auto envelope = parse_object(res->body);
      if (!envelope || !envelope->contains("choices") || !(*envelope)["choices"].is_array() ||
          (*envelope)["choices"].empty()) {
        last_transient = Transient{"malformed completion envelope", res->status};
        continue;
      }
      const json& message = (*envelope)["choices"][0].value("message", json::object());
      if (!message.contains("content") || !message["content"].is_string()) {
        last_transient = Transient{"completion has no message content", res->status};
        continue;
      }
      content = message["content"].get<std::string>();
    }
    try {
      return parse(content);
    } catch (const ReplyParseError&) {
      last_parse = std::current_exception();
      last_transient.reset();
    }
  }
  if (last_parse) std::rethrow_exception(last_parse);
  throw EndpointError(last_transient->what + " after " + std::to_string(config_.max_attempts) +
                          " attempts",
                      last_transient->status);
}

std::string Client::complete(const std::string& prompt, double temperature) const {
  return request_parsed<std::string>(prompt, temperature, [](const std::string& s) { return s; });
}

AugmentedRecord Client::augment_pair(const AugmentInput& input) const {
  if (input.instruction.empty() || input.output_a.empty() || input.output_b.empty())
    throw UsageError("augment_pair: instruction and both outputs must be non-empty");
  return request_parsed<AugmentedRecord>(augment_prompt(input), kAugmentTemperature,
                                         [](const std::string& s) { return parse_augment_reply(s); });
}

JudgeScores Client::judge_response(const JudgeInput& input) const {
  return request_parsed<JudgeScores>(judge_prompt(input), kJudgeTemperature,
                                     [](const std::string& s) { return parse_judge_reply(s); });
}

namespace {

template <class Out, class In, class Fn>
std::vector<Out> run_all(std::span<const In> inputs, std::size_t workers, Fn fn) {
  std::vector<std::optional<Out>> results(inputs.size());
  std::vector<std::exception_ptr> errors(inputs.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < inputs.size(); i = next++) {
      try {
        results[i].emplace(fn(inputs[i]));
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < std::min(workers, inputs.size()); ++w) pool.emplace_back(work);
  }
  std::vector<Out> out;
  out.reserve(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (errors[i]) std::rethrow_exception(errors[i]);
    out.push_back(std::move(*results[i]));
  }
  return out;
}

}  // namespace

std::vector<AugmentedRecord> Client::augment_all(std::span<const AugmentInput> inputs) const {
  return run_all<AugmentedRecord>(inputs, config_.max_in_flight,
                                  [this](const AugmentInput& in) { return augment_pair(in); });
}

std::vector<JudgeScores> Client::judge_all(std::span<const JudgeInput> inputs) const {
  return run_all<JudgeScores>(inputs, config_.max_in_flight,
                              [this](const JudgeInput& in) { return judge_response(in); });
}

}  // namespace hipo::llm
