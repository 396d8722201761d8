// SPDX-License-Identifier: Apache-2.0
//
// OpenMP kernels. Loops are tiled and reordered so the innermost loop runs
// across independent output elements (vectorizable) while each element still
// sees its terms in index-ascending order, which keeps results equal to
// kernels::serial.

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "hipo/kernels.hpp"

namespace hipo::kernels::parallel {

namespace {

// Parallel regions are not worth their overhead below this many multiply-adds.
constexpr std::size_t kMinParallelWork = 1 << 14;

// Register tile: kTileRows x kTileCols accumulators stay in vector registers
// while p runs over the shared dimension.
constexpr std::size_t kTileRows = 8;
constexpr std::size_t kTileCols = 16;

bool worth_parallel(std::size_t work) { return work >= kMinParallelWork; }

using Lanes = double __attribute__((vector_size(64)));
// Same vector type without the alignment requirement, for loads and stores.
using LanesU = double __attribute__((vector_size(64), aligned(8), may_alias));
constexpr std::size_t kLanes = sizeof(Lanes) / sizeof(double);
constexpr std::size_t kTileVectors = kTileCols / kLanes;

template <std::size_t Rows>
void full_tile(const double* a, const double* b, double* out, std::size_t r0, std::size_t j0,
               MatmulShape s) {
  Lanes acc[Rows][kTileVectors] = {};
  for (std::size_t p = 0; p < s.k; ++p) {
    Lanes b_row[kTileVectors];
    for (std::size_t v = 0; v < kTileVectors; ++v)
      b_row[v] = *reinterpret_cast<const LanesU*>(b + p * s.m + j0 + v * kLanes);
    for (std::size_t r = 0; r < Rows; ++r) {
      const double a_rp = a[(r0 + r) * s.k + p];
      for (std::size_t v = 0; v < kTileVectors; ++v) acc[r][v] += a_rp * b_row[v];
    }
  }
  for (std::size_t r = 0; r < Rows; ++r)
    for (std::size_t v = 0; v < kTileVectors; ++v)
      *reinterpret_cast<LanesU*>(out + (r0 + r) * s.m + j0 + v * kLanes) = acc[r][v];
}

template <std::size_t... Rows>
void remainder_tile(std::size_t rows, const double* a, const double* b, double* out,
                    std::size_t r0, std::size_t j0, MatmulShape s,
                    std::index_sequence<Rows...>) {
  ((rows == Rows + 1 ? full_tile<Rows + 1>(a, b, out, r0, j0, s) : void()), ...);
}

void edge_tile(const double* a, const double* b, double* out, std::size_t r0, std::size_t nr,
               std::size_t j0, std::size_t nj, MatmulShape s) {
  for (std::size_t r = r0; r < r0 + nr; ++r)
    for (std::size_t j = j0; j < j0 + nj; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < s.k; ++p) acc += a[r * s.k + p] * b[p * s.m + j];
      out[r * s.m + j] = acc;
    }
}

// out = a * b with one accumulator per element, p ascending. Column panels are
// the outer loop so a panel of b stays in L1 while every row block uses it.
void gemm(const double* a, const double* b, double* out, MatmulShape s) {
  const long panels = static_cast<long>((s.m + kTileCols - 1) / kTileCols);
  const std::size_t full_rows = s.n / kTileRows * kTileRows;
#pragma omp parallel for schedule(static) if (worth_parallel(s.n * s.k * s.m))
  for (long panel = 0; panel < panels; ++panel) {
    const std::size_t j0 = static_cast<std::size_t>(panel) * kTileCols;
    const std::size_t nj = std::min(kTileCols, s.m - j0);
    if (nj == kTileCols) {
      for (std::size_t r0 = 0; r0 < full_rows; r0 += kTileRows)
        full_tile<kTileRows>(a, b, out, r0, j0, s);
      if (full_rows < s.n)
        remainder_tile(s.n - full_rows, a, b, out, full_rows, j0, s,
                       std::make_index_sequence<kTileRows - 1>{});
    } else {
      edge_tile(a, b, out, 0, s.n, j0, nj, s);
    }
  }
}

std::vector<double> transpose(std::span<const double> x, std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = x[r * cols + c];
  return t;
}

void add_into(std::span<double> dst, const std::vector<double>& src) {
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

}  // namespace

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> out,
            MatmulShape s) {
  gemm(a.data(), b.data(), out.data(), s);
}

void matmul_grad_a(std::span<const double> dout, std::span<const double> b,
                   std::span<double> da, MatmulShape s) {
  const std::vector<double> b_t = transpose(b, s.k, s.m);
  std::vector<double> prod(s.n * s.k);
  gemm(dout.data(), b_t.data(), prod.data(), MatmulShape{s.n, s.m, s.k});
  add_into(da, prod);
}

void matmul_grad_b(std::span<const double> a, std::span<const double> dout,
                   std::span<double> db, MatmulShape s) {
  const std::vector<double> a_t = transpose(a, s.n, s.k);
  std::vector<double> prod(s.k * s.m);
  gemm(a_t.data(), dout.data(), prod.data(), MatmulShape{s.k, s.n, s.m});
  add_into(db, prod);
}

void attention_forward(std::span<const double> qkv, std::span<double> out,
                       std::span<double> probs, AttentionShape s) {
  const std::size_t width = s.width();
  const std::size_t stride = 3 * width;
  const double scale = 1.0 / std::sqrt(static_cast<double>(s.head_dim));
  const long pairs = static_cast<long>(s.batch * s.heads);
  const std::size_t work = s.batch * s.heads * s.seq_len * s.seq_len * s.head_dim;
#pragma omp parallel if (worth_parallel(work))
  {
    std::vector<double> scores(s.seq_len);
    std::vector<double> acc(s.head_dim);
#pragma omp for schedule(static)
    for (long bh = 0; bh < pairs; ++bh) {
      const std::size_t b = static_cast<std::size_t>(bh) / s.heads;
      const std::size_t h = static_cast<std::size_t>(bh) % s.heads;
      double* p_bh = probs.data() + static_cast<std::size_t>(bh) * s.seq_len * s.seq_len;
      auto row = [&](std::size_t t) { return (b * s.seq_len + t) * stride + h * s.head_dim; };
      for (std::size_t i = 0; i < s.seq_len; ++i) {
        const double* q = qkv.data() + row(i);
        double max_score = -INFINITY;
        for (std::size_t j = 0; j <= i; ++j) {
          const double* key = qkv.data() + row(j) + width;
          double dot = 0.0;
          for (std::size_t d = 0; d < s.head_dim; ++d) dot += q[d] * key[d];
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
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t j = 0; j <= i; ++j) {
          const double p = p_row[j];
          const double* v = qkv.data() + row(j) + 2 * width;
          for (std::size_t d = 0; d < s.head_dim; ++d) acc[d] += p * v[d];
        }
        double* o = out.data() + (b * s.seq_len + i) * width + h * s.head_dim;
        std::copy(acc.begin(), acc.end(), o);
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
  const long pairs = static_cast<long>(s.batch * s.heads);
  const std::size_t work = s.batch * s.heads * s.seq_len * s.seq_len * s.head_dim;
  // Each (sequence, head) pair touches a disjoint column block of dqkv.
#pragma omp parallel if (worth_parallel(work))
  {
    std::vector<double> dp(s.seq_len);
#pragma omp for schedule(static)
    for (long bh = 0; bh < pairs; ++bh) {
      const std::size_t b = static_cast<std::size_t>(bh) / s.heads;
      const std::size_t h = static_cast<std::size_t>(bh) % s.heads;
      const double* p_bh = probs.data() + static_cast<std::size_t>(bh) * s.seq_len * s.seq_len;
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
          const double p = p_row[j];
          const double* key = qkv.data() + row(j) + width;
          double* dk = dqkv.data() + row(j) + width;
          double* dv = dqkv.data() + row(j) + 2 * width;
          for (std::size_t d = 0; d < s.head_dim; ++d) {
            dq[d] += ds * key[d];
            dk[d] += ds * q[d];
            dv[d] += p * g[d];
          }
        }
      }
    }
  }
}

void log_softmax_rows(std::span<const double> x, std::span<double> out, std::size_t rows,
                      std::size_t cols) {
  const long n = static_cast<long>(rows);
#pragma omp parallel for schedule(static) if (worth_parallel(rows * cols))
  for (long r = 0; r < n; ++r) {
    const double* in = x.data() + r * cols;
    double max_v = -INFINITY;
    for (std::size_t c = 0; c < cols; ++c)
      if (in[c] > max_v) max_v = in[c];
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) total += std::exp(in[c] - max_v);
    const double log_z = max_v + std::log(total);
    double* o = out.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) o[c] = in[c] - log_z;
  }
}

}  // namespace hipo::kernels::parallel
