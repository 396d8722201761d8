// SPDX-License-Identifier: Apache-2.0

#include "hipo/segdata.hpp"

#include <exception>
#include <fstream>
#include <optional>
#include <sstream>

#include "json.hpp"

namespace hipo::seg {

namespace {

using nlohmann::json;

constexpr std::string_view kSegmentKeys[] = {"refined_query", "meta_thinking", "refined_answer"};

std::string string_field(const json& obj, std::string_view key, const std::string& path) {
  const auto it = obj.find(key);
  if (it == obj.end() || !it->is_string()) throw SchemaError(path);
  return it->get<std::string>();
}

SegmentedResponse response_from_json(const json& root, const std::string& side) {
  const auto it = root.find(side);
  if (it == root.end() || !it->is_object()) throw SchemaError(side);
  std::string texts[3];
  for (int k = 0; k < 3; ++k) {
    const std::string path = side + "." + std::string(kSegmentKeys[k]);
    texts[k] = string_field(*it, kSegmentKeys[k], path);
    if (texts[k].empty()) throw EmptySegmentError(path);
  }
  return make_response(std::move(texts[0]), std::move(texts[1]), std::move(texts[2]));
}

json response_to_json(const SegmentedResponse& r) {
  return json{{"refined_query", r.text_rq},
              {"meta_thinking", r.text_mt},
              {"refined_answer", r.text_a}};
}

// Non-blank lines with their 1-based line numbers.
std::vector<std::pair<std::size_t, std::string_view>> split_lines(std::string_view content) {
  std::vector<std::pair<std::size_t, std::string_view>> lines;
  std::size_t number = 0;
  std::size_t pos = 0;
  while (pos < content.size()) {
    std::size_t end = content.find('\n', pos);
    if (end == std::string_view::npos) end = content.size();
    ++number;
    std::string_view line = content.substr(pos, end - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") != std::string_view::npos)
      lines.emplace_back(number, line);
    pos = end + 1;
  }
  return lines;
}

}  // namespace

std::string_view to_string(SegmentKind kind) {
  switch (kind) {
    case SegmentKind::Rq: return "rq";
    case SegmentKind::Mt: return "mt";
    case SegmentKind::A: return "a";
    case SegmentKind::Y: return "y";
  }
  return "?";
}

Span SegmentSpans::of(SegmentKind kind) const {
  switch (kind) {
    case SegmentKind::Rq: return rq;
    case SegmentKind::Mt: return mt;
    case SegmentKind::A: return a;
    case SegmentKind::Y: return Span{rq.begin, a.end};
  }
  return {};
}

std::pair<lm::TokenSeq, SegmentSpans> compute_spans(const lm::Vocab& vocab,
                                                    std::string_view text_rq,
                                                    std::string_view text_mt,
                                                    std::string_view text_a) {
  if (text_rq.empty()) throw EmptySegmentError("refined_query");
  if (text_mt.empty()) throw EmptySegmentError("meta_thinking");
  if (text_a.empty()) throw EmptySegmentError("refined_answer");
  lm::TokenSeq tokens;
  SegmentSpans spans;
  Span* targets[] = {&spans.rq, &spans.mt, &spans.a};
  const std::string_view texts[] = {text_rq, text_mt, text_a};
  for (int k = 0; k < 3; ++k) {
    const lm::TokenSeq part = lm::tokenize(texts[k]);
    for (int id : part)
      if (static_cast<std::size_t>(id) >= vocab.size) throw InvalidTokenError(id, vocab.size);
    targets[k]->begin = tokens.size();
    tokens.insert(tokens.end(), part.begin(), part.end());
    targets[k]->end = tokens.size();
  }
  return {std::move(tokens), spans};
}

void validate_spans(const SegmentSpans& spans, std::size_t response_len) {
  using K = SpanError::Kind;
  const Span parts[] = {spans.rq, spans.mt, spans.a};
  const char* names[] = {"rq", "mt", "a"};
  for (int k = 0; k < 3; ++k) {
    if (parts[k].begin > parts[k].end || parts[k].end > response_len)
      throw SpanError(K::OutOfRange, std::string("span ") + names[k] + " out of range");
    if (parts[k].size() == 0) throw SpanError(K::Empty, std::string("span ") + names[k] + " is empty");
  }
  if (spans.rq.begin != 0) throw SpanError(K::Gap, "span rq does not start at 0");
  for (int k = 1; k < 3; ++k) {
    if (parts[k].begin < parts[k - 1].end)
      throw SpanError(K::Overlap, std::string("spans ") + names[k - 1] + " and " + names[k] +
                                      " overlap");
    if (parts[k].begin > parts[k - 1].end)
      throw SpanError(K::Gap, std::string("gap between spans ") + names[k - 1] + " and " +
                                  names[k]);
  }
  if (spans.a.end != response_len) throw SpanError(K::Gap, "span a does not reach the end");
}

SegmentedResponse make_response(std::string text_rq, std::string text_mt, std::string text_a) {
  auto [tokens, spans] = compute_spans(lm::Vocab{}, text_rq, text_mt, text_a);
  return SegmentedResponse{std::move(text_rq), std::move(text_mt), std::move(text_a),
                           std::move(tokens), spans};
}

PreferencePair make_pair(std::string prompt, SegmentedResponse chosen,
                         SegmentedResponse rejected) {
  if (prompt.empty()) throw DataError("empty prompt");
  validate_spans(chosen.spans, chosen.tokens.size());
  validate_spans(rejected.spans, rejected.tokens.size());
  if (chosen.tokens == rejected.tokens) throw DataError("chosen and rejected are identical");
  return PreferencePair{std::move(prompt), std::move(chosen), std::move(rejected)};
}

PreferencePair parse_record(std::string_view line) {
  json root;
  try {
    root = json::parse(line);
  } catch (const json::parse_error& e) {
    throw ParseError("malformed JSON", e.byte);
  }
  if (!root.is_object()) throw SchemaError("prompt");
  std::string prompt = string_field(root, "prompt", "prompt");
  SegmentedResponse chosen = response_from_json(root, "chosen");
  SegmentedResponse rejected = response_from_json(root, "rejected");
  return make_pair(std::move(prompt), std::move(chosen), std::move(rejected));
}

std::string serialize(const PreferencePair& pair) {
  const json root{{"prompt", pair.prompt},
                  {"chosen", response_to_json(pair.chosen)},
                  {"rejected", response_to_json(pair.rejected)}};
  return root.dump();
}

lm::TokenSeq encode_prompt(std::string_view prompt) {
  lm::TokenSeq ids{lm::kBos};
  const lm::TokenSeq bytes = lm::tokenize(prompt);
  ids.insert(ids.end(), bytes.begin(), bytes.end());
  return ids;
}

std::size_t pair_length(const PreferencePair& pair) {
  const std::size_t context = 1 + pair.prompt.size();
  return context + std::max(pair.chosen.tokens.size(), pair.rejected.tokens.size());
}

std::vector<std::size_t> oversized(const std::vector<PreferencePair>& pairs,
                                   std::size_t context_length) {
  std::vector<std::size_t> bad;
  for (std::size_t i = 0; i < pairs.size(); ++i)
    if (pair_length(pairs[i]) > context_length) bad.push_back(i);
  return bad;
}

void preflight(const std::vector<PreferencePair>& pairs, std::size_t context_length) {
  const std::vector<std::size_t> bad = oversized(pairs, context_length);
  if (bad.empty()) return;
  std::ostringstream msg;
  msg << bad.size() << " of " << pairs.size() << " records exceed the context length of "
      << context_length << " tokens; indices:";
  for (std::size_t i : bad) msg << ' ' << i;
  throw DataError(msg.str());
}

std::vector<PreferencePair> parse_jsonl(std::string_view content) {
  const auto lines = split_lines(content);
  const long n = static_cast<long>(lines.size());
  std::vector<std::optional<PreferencePair>> parsed(lines.size());
  std::vector<std::exception_ptr> errors(lines.size());
#pragma omp parallel for schedule(dynamic, 64)
  for (long i = 0; i < n; ++i) {
    try {
      parsed[i] = parse_record(lines[i].second);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  std::vector<PreferencePair> pairs;
  pairs.reserve(lines.size());
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (errors[i]) {
      try {
        std::rethrow_exception(errors[i]);
      } catch (const std::exception& e) {
        throw DataError("line " + std::to_string(lines[i].first) + ": " + e.what());
      }
    }
    pairs.push_back(std::move(*parsed[i]));
  }
  return pairs;
}

std::vector<PreferencePair> load_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_jsonl(buffer.str());
}

void write_jsonl(const std::filesystem::path& path, const std::vector<PreferencePair>& pairs) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& pair : pairs) out << serialize(pair) << '\n';
  if (!out) throw DataError("write failed: " + path.string());
}

}  // namespace hipo::seg
