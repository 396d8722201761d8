// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode differentiation over dense double matrices.
//
// A Graph records every primitive as it is evaluated; backward() walks the tape
// in reverse. Every value is a [rows, cols] matrix (vectors are [1, n] or
// [n, 1], scalars [1, 1]). All reductions run index-ascending, so evaluating
// the same computation twice is bit-identical.
//
// Any primitive producing a non-finite value throws NumericError naming itself.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hipo/kernels.hpp"
#include "hipo/params.hpp"

namespace hipo::diff {

struct Var {
  std::uint32_t id = 0;
};

class Graph {
 public:
  Graph() = default;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;
  Graph& operator=(const Graph&) = delete;
  // Independent copy for replay on another thread.
  Graph clone() const { return Graph(*this); }

  // Leaves.
  Var input(std::size_t rows, std::size_t cols, std::vector<double> values,
            bool requires_grad = false);
  Var constant(double value);
  Var param(const ParamTensor& tensor, bool requires_grad = true);

  std::size_t rows(Var v) const { return nodes_[v.id].rows; }
  std::size_t cols(Var v) const { return nodes_[v.id].cols; }
  std::span<const double> value(Var v) const { return nodes_[v.id].value; }
  double scalar(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  // Zero-filled until backward() reaches the node.
  std::span<const double> grad(Var v);
  std::size_t node_count() const { return nodes_.size(); }

  // Seeds d(root)/d(root) = 1 and propagates. root must be [1, 1].
  void backward(Var root);
  void zero_grads();

  // Trial re-evaluation after editing leaves in place. propagate() recomputes
  // only nodes downstream of an edited leaf and stops wherever a recomputed
  // value comes out bit-identical; revert() restores everything touched since
  // the first set_leaf.
  void set_leaf(Var leaf, std::size_t index, double value);
  void propagate();
  void revert();

  // Elementwise, same shapes.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double c);
  Var neg(Var a) { return scale(a, -1.0); }
  // x:[n, m] + bias:[1, m] broadcast over rows.
  Var add_row(Var x, Var bias);

  // a:[n, k] * b:[k, m].
  Var matmul(Var a, Var b);
  // Embedding lookup: out row r = table row ids[r].
  Var gather_rows(Var table, std::span<const int> ids);
  // Row selection: out row r = x row rows[r].
  Var select_rows(Var x, std::span<const std::size_t> rows);

  // tanh-approximated GELU.
  Var gelu(Var x);
  // Per-row normalization with learned gain and bias of shape [1, cols].
  Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
  Var log_softmax(Var x);
  // out:[n, 1], out[r] = x[r, cols[r]].
  Var pick(Var x, std::span<const int> cols);
  // Causal multi-head attention, qkv:[batch*seq_len, 3*width] -> [batch*seq_len, width].
  Var causal_attention(Var qkv, std::size_t batch, std::size_t seq_len, std::size_t heads);

  // Sum of x.flat[begin, end) as a [1, 1] value.
  Var range_sum(Var x, std::size_t begin, std::size_t end);
  // log(1 + exp(x)) elementwise, with the large-argument branch.
  Var softplus(Var x);
  // Sum / mean of [1, 1] values in the given order.
  Var sum(std::span<const Var> terms);
  Var mean(std::span<const Var> terms);

 private:
  Graph(const Graph&) = default;

  // Both write into nodes_[self]; forward fills value (and aux), backward
  // accumulates into the inputs' grads.
  using Forward = std::function<void(Graph&, std::uint32_t self)>;
  using Backward = std::function<void(Graph&, std::uint32_t self)>;

  struct Node {
    std::string op;
    std::size_t rows = 0, cols = 0;
    std::vector<double> value;
    // Forward intermediates the backward pass reuses.
    std::vector<double> aux;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::uint32_t> inputs;
    Forward forward;
    Backward backward;
    // During replay: the only columns whose values changed, when known.
    bool col_hint = false;
    std::vector<std::uint32_t> changed_cols;
  };

  // A leaf entry restores one element; other entries restore whole values.
  struct Saved {
    std::uint32_t id;
    std::vector<double> value, aux;
    std::size_t index = 0;
    double old = 0.0;
    bool leaf = false;
  };

  Var leaf(std::string op, std::size_t rows, std::size_t cols, std::vector<double> value,
           bool requires_grad);
  Var push(std::string op, std::size_t rows, std::size_t cols,
           std::initializer_list<Var> inputs, Forward forward, Backward backward);
  Var push(std::string op, std::size_t rows, std::size_t cols,
           std::vector<std::uint32_t> inputs, Forward forward, Backward backward);
  std::vector<double>& grad_buffer(std::uint32_t id);
  // Union of the changed columns of the dirty nodes among `ids`; false when
  // not replaying or when some dirty input changed in unknown columns.
  bool changed_columns(std::initializer_list<std::uint32_t> ids,
                       std::vector<std::uint32_t>& cols) const;
  void mark_columns(std::uint32_t self, std::vector<std::uint32_t> cols);

  std::vector<Node> nodes_;
  std::vector<char> dirty_;
  std::vector<Saved> undo_;
  std::uint32_t first_dirty_ = 0;
  bool replaying_ = false;
};

// Numerically stable scalar softplus and logistic function, shared with the
// non-graph loss code so both paths round identically.
double softplus(double x);
double sigmoid(double x);

// A scalar-valued computation. `params[i]` is the graph leaf for the i-th
// tensor of the ParamSet passed to the evaluator.
using Computation = std::function<Var(Graph&, std::span<const Var> params)>;

struct Evaluation {
  double value = 0.0;
  GradientMap gradients;
};

Evaluation evaluate_with_gradients(const Computation& f, const ParamSet& params);
double evaluate(const Computation& f, const ParamSet& params);

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::string worst_param;
  // Per tensor, aligned with the ParamSet.
  std::vector<double> relative_errors;
};

// Compares analytic gradients with central differences. For every parameter
// tensor p the error is |g_a - g_fd| / max(1e-12, |g_a| + |g_fd|) with
// Euclidean norms over the tensor; the maximum over tensors is returned.
// Throws UsageError when epsilon <= 0.
double grad_check(const Computation& f, const ParamSet& params, double epsilon);
GradCheckReport grad_check_report(const Computation& f, const ParamSet& params, double epsilon);

// Several scalar outputs built on one graph.
using MultiComputation =
    std::function<std::vector<Var>(Graph&, std::span<const Var> params)>;

// Checks each linear combination of the outputs (combos[c][k] weights output
// k) with a single finite-difference sweep; one report per combination.
std::vector<GradCheckReport> grad_check_combinations(const MultiComputation& f,
                                                     const ParamSet& params,
                                                     std::span<const std::vector<double>> combos,
                                                     double epsilon);

}  // namespace hipo::diff
