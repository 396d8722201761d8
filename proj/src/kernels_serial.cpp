// SPDX-License-Identifier: Apache-2.0
//
// Reference kernels: straightforward loops, one accumulator per output element.

#include <cmath>
#include <vector>

#include "hipo/kernels.hpp"

namespace hipo::kernels::serial {

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> out,
            MatmulShape s) {
  for (std::size_t i = 0; i < s.n; ++i) {
    for (std::size_t j = 0; j < s.m; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < s.k; ++p) acc += a[i * s.k + p] * b[p * s.m + j];
      out[i * s.m + j] = acc;
    }
  }
}

void matmul_grad_a(std::span<const double> dout, std::span<const double> b,
                   std::span<double> da, MatmulShape s) {
  for (std::size_t i = 0; i < s.n; ++i) {
    for (std::size_t p = 0; p < s.k; ++p) {
      double acc = 0.0;
      for (std::size_t j = 0; j < s.m; ++j) acc += dout[i * s.m + j] * b[p * s.m + j];
      da[i * s.k + p] += acc;
    }
  }
}

void matmul_grad_b(std::span<const double> a, std::span<const double> dout,
                   std::span<double> db, MatmulShape s) {
  for (std::size_t p = 0; p < s.k; ++p) {
    for (std::size_t j = 0; j < s.m; ++j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < s.n; ++i) acc += a[i * s.k + p] * dout[i * s.m + j];
      db[p * s.m + j] += acc;
    }
  }
}

void attention_forward(std::span<const double> qkv, std::span<double> out,
                       std::span<double> probs, AttentionShape s) {
  const std::size_t width = s.width();
  const std::size_t stride = 3 * width;
  const double scale = 1.0 / std::sqrt(static_cast<double>(s.head_dim));
  std::vector<double> scores(s.seq_len);
  for (std::size_t b = 0; b < s.batch; ++b) {
    for (std::size_t h = 0; h < s.heads; ++h) {
      double* p_bh = probs.data() + (b * s.heads + h) * s.seq_len * s.seq_len;
      for (std::size_t i = 0; i < s.seq_len; ++i) {
        const double* q = qkv.data() + (b * s.seq_len + i) * stride + h * s.head_dim;
        double max_score = -INFINITY;
        for (std::size_t j = 0; j <= i; ++j) {
          const double* k = qkv.data() + (b * s.seq_len + j) * stride + width + h * s.head_dim;
          double dot = 0.0;
          for (std::size_t d = 0; d < s.head_dim; ++d) dot += q[d] * k[d];
          scores[j] = dot * scale;
          if (scores[j] > max_score) max_score = scores[j];
        }
        double total = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          scores[j] = std::exp(scores[j] - max_score);
          total += scores[j];
        }
        double* p_row = p_bh + i * s.seq_len;
        for (std::size_t j = 0; j < s.seq_len; ++j) p_row[j] = j <= i ? scores[j] / total : 0.0;
        double* o = out.data() + (b * s.seq_len + i) * width + h * s.head_dim;
        for (std::size_t d = 0; d < s.head_dim; ++d) {
          double acc = 0.0;
          for (std::size_t j = 0; j <= i; ++j) {
            const double* v =
                qkv.data() + (b * s.seq_len + j) * stride + 2 * width + h * s.head_dim;
            acc += p_row[j] * v[d];
          }
          o[d] = acc;
        }
      }
    }
  }
}

void attention_backward(std::span<const double> qkv, std::span<const double> probs,
                        std::span<const double> dout, std::span<double> dqkv,
                        AttentionShape s) {
  const std::size_t width = s.width();
  const std::size_t stride = 3 * width;
  const double scale = 1.0 / std::sqrt(static_cast<double>(s.head_dim));
  std::vector<double> dp(s.seq_len);
  for (std::size_t b = 0; b < s.batch; ++b) {
    for (std::size_t h = 0; h < s.heads; ++h) {
      const double* p_bh = probs.data() + (b * s.heads + h) * s.seq_len * s.seq_len;
      auto row = [&](std::size_t t) { return (b * s.seq_len + t) * stride + h * s.head_dim; };
      for (std::size_t i = 0; i < s.seq_len; ++i) {
        const double* p_row = p_bh + i * s.seq_len;
        const double* g = dout.data() + (b * s.seq_len + i) * width + h * s.head_dim;
        double weighted = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          const double* v = qkv.data() + row(j) + 2 * width;
          double dot = 0.0;
          for (std::size_t d = 0; d < s.head_dim; ++d) dot += g[d] * v[d];
          dp[j] = dot;
          weighted += p_row[j] * dot;
        }
        const double* q = qkv.data() + row(i);
        double* dq = dqkv.data() + row(i);
        for (std::size_t j = 0; j <= i; ++j) {
          const double ds = p_row[j] * (dp[j] - weighted) * scale;
          const double* k = qkv.data() + row(j) + width;
          double* dk = dqkv.data() + row(j) + width;
          double* dv = dqkv.data() + row(j) + 2 * width;
          for (std::size_t d = 0; d < s.head_dim; ++d) {
            dq[d] += ds * k[d];
            dk[d] += ds * q[d];
            dv[d] += p_row[j] * g[d];
          }
        }
      }
    }
  }
}

void log_softmax_rows(std::span<const double> x, std::span<double> out, std::size_t rows,
                      std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data() + r * cols;
    double max_v = -INFINITY;
    for (std::size_t c = 0; c < cols; ++c)
      if (in[c] > max_v) max_v = in[c];
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) total += std::exp(in[c] - max_v);
    const double log_z = max_v + std::log(total);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = in[c] - log_z;
  }
}

}  // namespace hipo::kernels::serial
