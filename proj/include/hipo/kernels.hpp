// SPDX-License-Identifier: Apache-2.0
//
// Dense kernels used by the autodiff graph. Two implementations with identical
// signatures: `serial` is the plain reference, `parallel` distributes
// independent output rows over OpenMP threads. Every output element is reduced
// by a single thread in index-ascending order, so both produce bit-identical
// results for any thread count.

#pragma once

#include <cstddef>
#include <span>

namespace hipo::kernels {

// Row-major shapes a:[n,k], b:[k,m], out:[n,m].
struct MatmulShape {
  std::size_t n, k, m;
};

// Causal multi-head self-attention over `batch` sequences of `seq_len`
// positions each. qkv rows are [q | k | v], each block `heads * head_dim` wide.
struct AttentionShape {
  std::size_t batch, seq_len, heads, head_dim;
  std::size_t rows() const { return batch * seq_len; }
  std::size_t width() const { return heads * head_dim; }
  std::size_t probs_size() const { return batch * heads * seq_len * seq_len; }
};

namespace serial {

// out = a * b
void matmul(std::span<const double> a, std::span<const double> b, std::span<double> out,
            MatmulShape s);
// da += dout * b^T
void matmul_grad_a(std::span<const double> dout, std::span<const double> b,
                   std::span<double> da, MatmulShape s);
// db += a^T * dout
void matmul_grad_b(std::span<const double> a, std::span<const double> dout,
                   std::span<double> db, MatmulShape s);
// out:[rows, width]; probs:[batch, heads, seq_len, seq_len] is saved for backward.
void attention_forward(std::span<const double> qkv, std::span<double> out,
                       std::span<double> probs, AttentionShape s);
// dqkv += J^T dout
void attention_backward(std::span<const double> qkv, std::span<const double> probs,
                        std::span<const double> dout, std::span<double> dqkv,
                        AttentionShape s);
void log_softmax_rows(std::span<const double> x, std::span<double> out, std::size_t rows,
                      std::size_t cols);

}  // namespace serial

namespace parallel {

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> out,
            MatmulShape s);
void matmul_grad_a(std::span<const double> dout, std::span<const double> b,
                   std::span<double> da, MatmulShape s);
void matmul_grad_b(std::span<const double> a, std::span<const double> dout,
                   std::span<double> db, MatmulShape s);
void attention_forward(std::span<const double> qkv, std::span<double> out,
                       std::span<double> probs, AttentionShape s);
void attention_backward(std::span<const double> qkv, std::span<const double> probs,
                        std::span<const double> dout, std::span<double> dqkv,
                        AttentionShape s);
void log_softmax_rows(std::span<const double> x, std::span<double> out, std::size_t rows,
                      std::size_t cols);

}  // namespace parallel

}  // namespace hipo::kernels
