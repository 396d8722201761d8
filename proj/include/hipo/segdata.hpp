// SPDX-License-Identifier: Apache-2.0
//
// Segmented preference records. A response is three consecutive byte
// segments (refined query, meta-thinking, answer); its tokens are their
// concatenation and the spans partition the token sequence exactly.

#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "hipo/error.hpp"
#include "hipo/lm.hpp"

namespace hipo::seg {

enum class SegmentKind { Rq, Mt, A, Y };

inline constexpr SegmentKind kAllKinds[] = {SegmentKind::Rq, SegmentKind::Mt, SegmentKind::A,
                                            SegmentKind::Y};

std::string_view to_string(SegmentKind kind);

// Half-open token range [begin, end).
struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  friend bool operator==(const Span&, const Span&) = default;
};

struct SegmentSpans {
  Span rq, mt, a;
  // Y: the whole response.
  Span of(SegmentKind kind) const;
  friend bool operator==(const SegmentSpans&, const SegmentSpans&) = default;
};

class SpanError : public DataError {
 public:
  enum class Kind { Overlap, Gap, OutOfRange, Empty };
  SpanError(Kind kind, const std::string& what) : DataError(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct SegmentedResponse {
  std::string text_rq, text_mt, text_a;
  lm::TokenSeq tokens;
  SegmentSpans spans;
  friend bool operator==(const SegmentedResponse&, const SegmentedResponse&) = default;
};

struct PreferencePair {
  std::string prompt;
  SegmentedResponse chosen, rejected;
  friend bool operator==(const PreferencePair&, const PreferencePair&) = default;
};

// Throws EmptySegmentError naming the first empty segment.
std::pair<lm::TokenSeq, SegmentSpans> compute_spans(const lm::Vocab& vocab,
                                                    std::string_view text_rq,
                                                    std::string_view text_mt,
                                                    std::string_view text_a);

// Throws SpanError unless rq, mt, a partition [0, response_len) in order.
void validate_spans(const SegmentSpans& spans, std::size_t response_len);

SegmentedResponse make_response(std::string text_rq, std::string text_mt, std::string text_a);

// Throws DataError for an empty prompt or chosen == rejected.
PreferencePair make_pair(std::string prompt, SegmentedResponse chosen,
                         SegmentedResponse rejected);

// One JSON object per line:
// {"prompt": .., "chosen": {"refined_query", "meta_thinking", "refined_answer"},
//  "rejected": {..}}
// Throws ParseError (malformed JSON), SchemaError (missing key, reported as a
// dotted path), EmptySegmentError, or DataError.
PreferencePair parse_record(std::string_view line);
std::string serialize(const PreferencePair& pair);

// Model context for a prompt: BOS followed by the prompt bytes.
lm::TokenSeq encode_prompt(std::string_view prompt);

// Longest teacher-forced sequence of the pair (context plus response).
std::size_t pair_length(const PreferencePair& pair);

// Indices of pairs that do not fit a model with this context length.
std::vector<std::size_t> oversized(const std::vector<PreferencePair>& pairs,
                                   std::size_t context_length);
// Throws DataError listing the offending record indices.
void preflight(const std::vector<PreferencePair>& pairs, std::size_t context_length);

// Blank lines are skipped. A failing record is reported as DataError with its
// 1-based line number; the first failing line wins.
std::vector<PreferencePair> parse_jsonl(std::string_view content);
std::vector<PreferencePair> load_jsonl(const std::filesystem::path& path);
void write_jsonl(const std::filesystem::path& path, const std::vector<PreferencePair>& pairs);

}  // namespace hipo::seg
