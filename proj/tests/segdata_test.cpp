// SPDX-License-Identifier: Apache-2.0

#include <fstream>
#include <string>

#include "doctest.h"
#include "hipo/error.hpp"
#include "hipo/segdata.hpp"
#include "hipo/synth.hpp"
#include "support.hpp"

using namespace hipo;
using seg::Span;
using seg::SpanError;

namespace {

const char* kRecord =
    R"({"prompt":"Q: What is 1+1?\n","chosen":{"refined_query":"Find 1+1.\n","meta_thinking":"ones 1+1=2.\n","refined_answer":"Answer: 2\n"},"rejected":{"refined_query":"Find 1+1.\n","meta_thinking":"ones 1+1=2.\n","refined_answer":"Answer: 3\n"}})";

SpanError::Kind span_error_kind(const seg::SegmentSpans& s, std::size_t len) {
  try {
    seg::validate_spans(s, len);
  } catch (const SpanError& e) {
    return e.kind();
  }
  FAIL("expected SpanError");
  return SpanError::Kind::Empty;
}

}  // namespace

TEST_CASE("span computation") {
  auto [tokens, spans] = seg::compute_spans(lm::Vocab{}, "ab", "cd", "ef");
  CHECK(tokens == lm::tokenize("abcdef"));
  CHECK(spans.rq == Span{0, 2});
  CHECK(spans.mt == Span{2, 4});
  CHECK(spans.a == Span{4, 6});
  CHECK(spans.of(seg::SegmentKind::Y) == Span{0, 6});

  auto [t3, s3] = seg::compute_spans(lm::Vocab{}, "x", "y", "z");
  CHECK(t3.size() == 3);
  CHECK(s3.rq.size() == 1);
  CHECK(s3.mt.size() == 1);
  CHECK(s3.a.size() == 1);

  CHECK_THROWS_AS(seg::compute_spans(lm::Vocab{}, "", "y", "z"), EmptySegmentError);
  CHECK_THROWS_AS(seg::compute_spans(lm::Vocab{}, "x", "", "z"), EmptySegmentError);
  CHECK_THROWS_AS(seg::compute_spans(lm::Vocab{}, "x", "y", ""), EmptySegmentError);
}

TEST_CASE("random segments detokenize back to their text") {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::string texts[3] = {testing::random_text(rng, 1, 30), testing::random_text(rng, 1, 30),
                                  testing::random_text(rng, 1, 30)};
    const auto r = seg::make_response(texts[0], texts[1], texts[2]);
    const Span spans[3] = {r.spans.rq, r.spans.mt, r.spans.a};
    std::size_t width = 0;
    for (int k = 0; k < 3; ++k) {
      CHECK(lm::detokenize(std::span(r.tokens).subspan(spans[k].begin, spans[k].size())) == texts[k]);
      width += spans[k].size();
    }
    CHECK(width == r.tokens.size());
  }
}

TEST_CASE("span validation") {
  using K = SpanError::Kind;
  CHECK_NOTHROW(seg::validate_spans({{0, 4}, {4, 8}, {8, 10}}, 10));
  CHECK(span_error_kind({{0, 4}, {3, 8}, {8, 10}}, 10) == K::Overlap);
  CHECK(span_error_kind({{0, 4}, {5, 8}, {8, 10}}, 10) == K::Gap);
  CHECK(span_error_kind({{0, 4}, {4, 8}, {8, 11}}, 10) == K::OutOfRange);
  CHECK(span_error_kind({{0, 4}, {4, 4}, {4, 10}}, 10) == K::Empty);
  CHECK(span_error_kind({{1, 4}, {4, 8}, {8, 10}}, 10) == K::Gap);
  CHECK(span_error_kind({{0, 4}, {4, 8}, {8, 9}}, 10) == K::Gap);
}

TEST_CASE("record parsing") {
  const auto p = seg::parse_record(kRecord);
  CHECK(p.prompt == "Q: What is 1+1?\n");
  CHECK(p.chosen.text_mt == "ones 1+1=2.\n");
  CHECK(p.rejected.text_a == "Answer: 3\n");
  CHECK(seg::parse_record(seg::serialize(p)) == p);
}

TEST_CASE("record errors") {
  std::string missing = kRecord;
  missing.replace(missing.find("\"meta_thinking\""), 15, "\"meta_thoughts\"");
  try {
    seg::parse_record(missing);
    FAIL("expected SchemaError");
  } catch (const SchemaError& e) {
    CHECK(e.key() == "chosen.meta_thinking");
  }

  std::string empty = kRecord;
  empty.replace(empty.find("\"Answer: 3\\n\""), 13, "\"\"");
  CHECK_THROWS_AS(seg::parse_record(empty), EmptySegmentError);

  try {
    seg::parse_record(R"({"prompt": "x", "chosen": {)");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.byte_offset() == 28);
  }

  std::string same = kRecord;
  same.replace(same.find("\"Answer: 3\\n\""), 13, "\"Answer: 2\\n\"");
  CHECK_THROWS_AS(seg::parse_record(same), DataError);
  CHECK_THROWS_AS(seg::parse_record("[1, 2]"), SchemaError);
}

TEST_CASE("serialize then parse is the identity") {
  Rng rng(2);
  for (const auto& p : testing::random_pairs(rng, 100, 20)) CHECK(seg::parse_record(seg::serialize(p)) == p);
}

TEST_CASE("a 1000-record synthetic file loads without errors") {
  testing::TempDir dir("segdata");
  const auto pairs = synth::gen_dataset(1000, 3, 999);
  seg::write_jsonl(dir / "d.jsonl", pairs);
  const auto loaded = seg::load_jsonl(dir / "d.jsonl");
  CHECK(loaded.size() == 1000);
  CHECK(loaded == pairs);
}

TEST_CASE("JSONL errors carry the line number") {
  const std::string content = std::string(kRecord) + "\n\n" + kRecord + "\n{\"prompt\": 3}\n";
  try {
    seg::parse_jsonl(content);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).starts_with("line 4:"));
  }
  CHECK(seg::parse_jsonl(std::string(kRecord) + "\n\n" + kRecord + "\n").size() == 2);
}

TEST_CASE("pairs beyond the context are listed at load time") {
  auto pairs = std::vector{seg::parse_record(kRecord)};
  pairs.push_back(seg::make_pair(std::string(100, 'p'), seg::make_response("a", "b", "c"),
                                 seg::make_response("a", "b", "d")));
  pairs.push_back(pairs[0]);
  CHECK(seg::pair_length(pairs[0]) == 1 + 16 + 32);
  CHECK(seg::oversized(pairs, 64) == std::vector<std::size_t>{1});
  try {
    seg::preflight(pairs, 64);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("indices: 1") != std::string::npos);
  }
  CHECK_NOTHROW(seg::preflight(pairs, 128));
}
