// SPDX-License-Identifier: Apache-2.0
//
// Serves the default mock responder until SIGINT or SIGTERM:
//   hipo-mock-llm [--host 127.0.0.1] [--port 0]
// Prints the endpoint URL on the first line of stdout.

#include <csignal>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "hipo/mock_llm.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Offline chat-completions endpoint for augment and judge", "hipo-mock-llm"};
  std::string host = "127.0.0.1";
  int port = 0;
  app.add_option("--host", host, "Bind address")->capture_default_str();
  app.add_option("--port", port, "Port, 0 for any free port")->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  sigset_t stop_signals;
  sigemptyset(&stop_signals);
  sigaddset(&stop_signals, SIGINT);
  sigaddset(&stop_signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &stop_signals, nullptr);

  try {
    hipo::llm::MockLlmServer server(hipo::llm::default_mock_reply, host, port);
    std::cout << server.url() << std::endl;
    int sig = 0;
    sigwait(&stop_signals, &sig);
    server.stop();
    std::cerr << "served " << server.call_count() << " requests\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
  return 0;
}
