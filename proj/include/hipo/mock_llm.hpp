// SPDX-License-Identifier: Apache-2.0
//
// In-process chat-completions server for tests and offline runs. The default
// responder answers augmentation prompts with a schema-valid rewrite of the
// two outputs and judge prompts with integer scores derived from a hash of the
// response text.

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "hipo/llm.hpp"

namespace hipo::llm {

struct MockReply {
  int status = 200;
  // Message content, wrapped in a completion envelope unless `raw_body`.
  std::string content;
  bool raw_body = false;
};

// Called with the user message and the 0-based index of the request.
using MockHandler = std::function<MockReply(const std::string& prompt, std::size_t call)>;

MockReply default_mock_reply(const std::string& prompt, std::size_t call);

// Judge scores the default responder gives a response.
JudgeScores mock_scores(std::string_view response);

class MockLlmServer {
 public:
  explicit MockLlmServer(MockHandler handler = default_mock_reply, const std::string& host = "127.0.0.1",
                         int port = 0);
  ~MockLlmServer();
  MockLlmServer(const MockLlmServer&) = delete;
  MockLlmServer& operator=(const MockLlmServer&) = delete;

  int port() const { return port_; }
  std::string url() const;
  std::size_t call_count() const;
  std::vector<std::string> request_bodies() const;

  // Blocks until stop() is called from another thread or a signal handler.
  void wait();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::string host_;
  int port_ = 0;
};

}  // namespace hipo::llm
