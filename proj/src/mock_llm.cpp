// SPDX-License-Identifier: Apache-2.0

#include "hipo/mock_llm.hpp"

#include "httplib.h"
#include "json.hpp"

namespace hipo::llm {

namespace {

using nlohmann::json;

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Text between `open` and the following `close` marker, searching from the end
// so that outputs quoting the markers do not confuse the split.
std::string between(const std::string& s, std::string_view open, std::string_view close) {
  const std::size_t end = s.rfind(close);
  if (end == std::string::npos) return {};
  const std::size_t begin = s.rfind(open, end);
  if (begin == std::string::npos) return {};
  return s.substr(begin + open.size(), end - begin - open.size());
}

MockReply augment_reply(const std::string& prompt) {
  const std::string tail = prompt.substr(prompt.rfind("\nInstruction:\n"));
  const std::string instruction = between(tail, "\nInstruction:\n", "\n\noutput_a:\n");
  const std::string a = between(tail, "\n\noutput_a:\n", "\n\noutput_b:\n");
  const std::string b = between(tail, "\n\noutput_b:\n", "\n\nOriginally preferred: ");
  auto rewrite = [&](const std::string& out) {
    return json{{"refined_query", "Restated: " + instruction},
                {"meta_thinking", "Steps behind the answer: " + std::to_string(out.size()) + " bytes."},
                {"refined_answer", out}};
  };
  return MockReply{200, json{{"output_a", rewrite(a)}, {"output_b", rewrite(b)}}.dump(), false};
}

MockReply judge_reply(const std::string& prompt) {
  const std::string response = prompt.substr(prompt.rfind("\nResponse:\n") + 11);
  const JudgeScores s = mock_scores(response.substr(0, response.size() - 1));
  return MockReply{200, scores_json(s), false};
}

std::string envelope(const std::string& content) {
  return json{{"object", "chat.completion"},
              {"choices", json::array({json{{"index", 0},
                                            {"message", {{"role", "assistant"}, {"content", content}}},
                                            {"finish_reason", "stop"}}})}}
      .dump();
}

}  // namespace

JudgeScores mock_scores(std::string_view response) {
  std::uint64_t h = fnv1a(response);
  JudgeScores s;
  for (auto& v : s.values) {
    v = static_cast<double>(h % 11);
    h /= 11;
  }
  return s;
}

MockReply default_mock_reply(const std::string& prompt, std::size_t) {
  if (prompt.find("following cognitive structure") != std::string::npos &&
      prompt.find("\nInstruction:\n") != std::string::npos)
    return augment_reply(prompt);
  if (prompt.find("expert evaluator of mathematical reasoning") != std::string::npos &&
      prompt.find("\nResponse:\n") != std::string::npos)
    return judge_reply(prompt);
  return MockReply{200, prompt, false};
}

struct MockLlmServer::Impl {
  httplib::Server server;
  std::thread thread;
  MockHandler handler;
  mutable std::mutex mutex;
  std::vector<std::string> bodies;
};

MockLlmServer::MockLlmServer(MockHandler handler, const std::string& host, int port)
    : impl_(std::make_unique<Impl>()), host_(host) {
  impl_->handler = std::move(handler);
  Impl* impl = impl_.get();
  impl->server.Post(".*", [impl](const httplib::Request& req, httplib::Response& res) {
    std::size_t call = 0;
    {
      std::lock_guard lock(impl->mutex);
      call = impl->bodies.size();
      impl->bodies.push_back(req.body);
    }
    std::string prompt;
    try {
      const json body = json::parse(req.body);
      prompt = body.at("messages").at(0).at("content").get<std::string>();
    } catch (const json::exception& e) {
      res.status = 400;
      res.set_content(json{{"error", e.what()}}.dump(), "application/json");
      return;
    }
    const MockReply reply = impl->handler(prompt, call);
    res.status = reply.status;
    res.set_content(reply.raw_body ? reply.content : envelope(reply.content), "application/json");
  });
  if (port == 0) {
    port_ = impl->server.bind_to_any_port(host);
  } else {
    port_ = impl->server.bind_to_port(host, port) ? port : -1;
  }
  if (port_ <= 0) throw EndpointError("mock server cannot bind " + host, 0);
  impl->thread = std::thread([impl] { impl->server.listen_after_bind(); });
  impl->server.wait_until_ready();
}

MockLlmServer::~MockLlmServer() { stop(); }

std::string MockLlmServer::url() const {
  return "http://" + host_ + ":" + std::to_string(port_) + "/v1/chat/completions";
}

std::size_t MockLlmServer::call_count() const {
  std::lock_guard lock(impl_->mutex);
  return impl_->bodies.size();
}

std::vector<std::string> MockLlmServer::request_bodies() const {
  std::lock_guard lock(impl_->mutex);
  return impl_->bodies;
}

void MockLlmServer::wait() {
  if (impl_->thread.joinable()) impl_->thread.join();
}

void MockLlmServer::stop() {
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace hipo::llm
