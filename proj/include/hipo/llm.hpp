// SPDX-License-Identifier: Apache-2.0
//
// Chat-completions client for dataset augmentation and judging.
//
//   POST <endpoint>  {"model", "messages": [{"role": "user", "content"}], "temperature"}
//   reply text       choices[0].message.content
//
// Transport failures, 429/5xx replies and unparseable JSON are retried with
// exponential backoff; schema and range violations are not.

#pragma once

#include <array>
#include <cstddef>
#include <memory>
#include <semaphore>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hipo/error.hpp"
#include "hipo/segdata.hpp"

namespace hipo::llm {

class ReplyParseError : public DataError {
 public:
  ReplyParseError(const std::string& what, std::string raw)
      : DataError(what), raw_(std::move(raw)) {}
  const std::string& raw() const { return raw_; }

 private:
  std::string raw_;
};

class AugmentParseError : public ReplyParseError {
 public:
  using ReplyParseError::ReplyParseError;
};

class RangeError : public DataError {
 public:
  using DataError::DataError;
};

class EmptySetError : public DataError {
 public:
  EmptySetError() : DataError("no scores to aggregate") {}
};

struct EndpointConfig {
  std::string url;  // scheme://host[:port][/path]
  std::string model;
  std::string api_key;
  std::size_t max_attempts = 5;
  double backoff_base_seconds = 1.0;
  std::size_t max_in_flight = 4;
  double timeout_seconds = 120.0;

  // HIPO_LLM_ENDPOINT, HIPO_LLM_MODEL, HIPO_LLM_KEY. Throws UsageError when the
  // endpoint is unset.
  static EndpointConfig from_env();
};

// --- prompts and wire format ---------------------------------------------

enum class Preferred { A, B };

struct AugmentInput {
  std::string instruction;
  std::string output_a, output_b;
  Preferred preferred = Preferred::A;
};

struct JudgeInput {
  std::string problem;
  std::string response;
};

std::string augment_prompt(const AugmentInput& input);
std::string judge_prompt(const JudgeInput& input);
// Serialized request body; byte-stable for equal arguments.
std::string request_body(std::string_view model, std::string_view prompt, double temperature);

inline constexpr double kJudgeTemperature = 0.0;
inline constexpr double kAugmentTemperature = 0.0;

// --- augmentation --------------------------------------------------------

struct Segments {
  std::string refined_query, meta_thinking, refined_answer;
  friend bool operator==(const Segments&, const Segments&) = default;
};

struct AugmentedRecord {
  Segments output_a, output_b;
  friend bool operator==(const AugmentedRecord&, const AugmentedRecord&) = default;
};

// Strict: the whole reply must be one JSON object. Throws AugmentParseError,
// SchemaError (dotted path, e.g. "output_b.refined_answer") or
// EmptySegmentError.
AugmentedRecord parse_augment_reply(std::string_view reply);

// Chosen is the preferred output. Segment separators are attached to the end
// of Rq and Mt so that the spans partition the response.
seg::PreferencePair to_preference_pair(const AugmentedRecord& record, const AugmentInput& input);

// --- judging ---------------------------------------------------------------

inline constexpr std::size_t kAxes = 9;

struct AxisName {
  const char* group;
  const char* key;
};

// Radar axis order.
inline constexpr std::array<AxisName, kAxes> kAxisNames{{
    {"coherence", "logical_flow"},
    {"coherence", "structural_organization"},
    {"coherence", "consistency"},
    {"accuracy", "domain_knowledge"},
    {"accuracy", "reasoning_validity"},
    {"goal_completion", "strategy_usefulness"},
    {"goal_completion", "progress_toward_solution"},
    {"goal_completion", "partial_success"},
    {"goal_completion", "error_robustness"},
}};

struct JudgeScores {
  std::array<double, kAxes> values{};
  friend bool operator==(const JudgeScores&, const JudgeScores&) = default;
};

// Throws ReplyParseError, SchemaError ("accuracy", "coherence.consistency") or
// RangeError for a score outside [0, 10].
JudgeScores parse_judge_reply(std::string_view reply);
std::string scores_json(const JudgeScores& scores);

struct RadarSummary {
  std::array<double, kAxes> means{};
  std::size_t count = 0;
};

// Per-axis arithmetic mean, summed in input order. Throws EmptySetError.
RadarSummary aggregate_scores(std::span<const JudgeScores> scores);
std::string radar_json(const RadarSummary& summary);

// --- client ----------------------------------------------------------------

class Client {
 public:
  explicit Client(EndpointConfig config);
  Client(const Client&) = delete;
  Client& operator=(const Client&) = delete;

  const EndpointConfig& config() const { return config_; }

  // One completion with transport retries. Throws EndpointError.
  std::string complete(const std::string& prompt, double temperature) const;

  AugmentedRecord augment_pair(const AugmentInput& input) const;
  JudgeScores judge_response(const JudgeInput& input) const;

  // Up to max_in_flight concurrent requests; results in input order. The
  // error of the lowest failing index is rethrown.
  std::vector<AugmentedRecord> augment_all(std::span<const AugmentInput> inputs) const;
  std::vector<JudgeScores> judge_all(std::span<const JudgeInput> inputs) const;

 private:
  template <class T, class Parse>
  T request_parsed(const std::string& prompt, double temperature, Parse parse) const;
  void backoff(std::size_t attempt) const;

  EndpointConfig config_;
  std::string origin_, path_;
  mutable std::counting_semaphore<1024> in_flight_;
};

}  // namespace hipo::llm
