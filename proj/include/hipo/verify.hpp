// SPDX-License-Identifier: Apache-2.0
//
// Self-checks shared by the CLI and the test suites: a brute-force oracle for
// small bigram models and a finite-difference check of the full loss.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hipo/loss.hpp"
#include "hipo/trainer.hpp"

namespace hipo::verify {

// Largest absolute differences between the library and direct softmax
// enumeration in extended precision.
struct OracleReport {
  std::size_t cases = 0;
  double nll = 0.0;
  double segment_logprob = 0.0;
  double dpo = 0.0;
  double hipo = 0.0;
  // |1 - total probability of all responses of one length|.
  double sequence_mass = 0.0;
  double max_error() const;
};

// Random 0-layer models with vocab 2..5 and sequences of at most 8 tokens.
OracleReport run_oracle(std::uint64_t seed, std::size_t cases);
std::string oracle_json(const OracleReport& report);

struct LossGradReport {
  std::vector<std::string> rows;
  std::vector<double> errors;  // aligned with rows
  double max_error = 0.0;
  std::string worst_row, worst_param;
  // Largest |gradient| over reference parameters when they sit in the same
  // graph as the policy.
  double max_reference_grad = 0.0;
};

// Three short hand-written pairs with one-byte prompts (22 scored tokens).
std::vector<seg::PreferencePair> gradcheck_batch();

// Finite-difference check of sum_k w_k L_k for every row with one sweep over
// the policy parameters, plus the reference-gradient check.
LossGradReport grad_check_loss(const lm::Model& policy, const lm::Model& reference,
                               const std::vector<seg::PreferencePair>& batch,
                               const std::vector<train::RegimeRow>& rows, double beta,
                               double epsilon);
std::string gradcheck_json(const LossGradReport& report);

}  // namespace hipo::verify
