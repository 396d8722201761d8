// SPDX-License-Identifier: Apache-2.0

#include "hipo/diff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "hipo/error.hpp"

namespace hipo::diff {

namespace {

void check_finite(std::string_view op, std::span<const double> values) {
  for (double v : values)
    if (!std::isfinite(v)) throw NumericError(std::string(op));
}

void require(bool ok, std::string_view op, const std::string& what) {
  if (!ok) throw UsageError(std::string(op) + ": " + what);
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

}  // namespace

double softplus(double x) {
  // log(1 + e^x) = x + log(1 + e^-x) for x > 0; keeps exp() argument <= 0.
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Var Graph::leaf(std::string op, std::size_t rows, std::size_t cols, std::vector<double> value,
                bool requires_grad) {
  check_finite(op, value);
  Node node;
  node.op = std::move(op);
  node.rows = rows;
  node.cols = cols;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Graph::push(std::string op, std::size_t rows, std::size_t cols,
                std::initializer_list<Var> inputs, Forward forward, Backward backward) {
  std::vector<std::uint32_t> ids;
  ids.reserve(inputs.size());
  for (Var v : inputs) ids.push_back(v.id);
  return push(std::move(op), rows, cols, std::move(ids), std::move(forward),
              std::move(backward));
}

Var Graph::push(std::string op, std::size_t rows, std::size_t cols,
                std::vector<std::uint32_t> inputs, Forward forward, Backward backward) {
  Node node;
  node.op = std::move(op);
  node.rows = rows;
  node.cols = cols;
  node.value.assign(rows * cols, 0.0);
  for (std::uint32_t in : inputs) node.requires_grad = node.requires_grad || nodes_[in].requires_grad;
  node.inputs = std::move(inputs);
  node.forward = std::move(forward);
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  const auto id = static_cast<std::uint32_t>(nodes_.size() - 1);
  nodes_[id].forward(*this, id);
  check_finite(nodes_[id].op, nodes_[id].value);
  return Var{id};
}

std::vector<double>& Graph::grad_buffer(std::uint32_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

double Graph::scalar(Var v) const {
  const Node& n = nodes_[v.id];
  require(n.value.size() == 1, "scalar", "value is not [1, 1]");
  return n.value[0];
}

std::span<const double> Graph::grad(Var v) { return grad_buffer(v.id); }

Var Graph::input(std::size_t rows, std::size_t cols, std::vector<double> values,
                 bool requires_grad) {
  require(values.size() == rows * cols, "input", "value count does not match shape");
  return leaf("input", rows, cols, std::move(values), requires_grad);
}

Var Graph::constant(double value) { return input(1, 1, {value}, false); }

Var Graph::param(const ParamTensor& tensor, bool requires_grad) {
  return leaf("param " + tensor.name, tensor.rows(), tensor.cols(), tensor.values, requires_grad);
}

void Graph::backward(Var root) {
  require(nodes_[root.id].value.size() == 1, "backward", "root must be a scalar");
  if (!nodes_[root.id].requires_grad) return;
  grad_buffer(root.id)[0] += 1.0;
  for (std::uint32_t id = root.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    check_finite("backward", n.grad);
    n.backward(*this, id);
  }
}

void Graph::zero_grads() {
  for (Node& n : nodes_) n.grad.clear();
}

void Graph::set_leaf(Var v, std::size_t index, double value) {
  Node& n = nodes_[v.id];
  require(!n.forward, "set_leaf", "not a leaf");
  require(index < n.value.size(), "set_leaf", "index out of range");
  if (dirty_.size() != nodes_.size()) dirty_.assign(nodes_.size(), 0);
  if (undo_.empty() || v.id < first_dirty_) first_dirty_ = v.id;
  Saved saved{v.id, {}, {}};
  saved.index = index;
  saved.old = n.value[index];
  saved.leaf = true;
  undo_.push_back(std::move(saved));
  const auto col = static_cast<std::uint32_t>(index % n.cols);
  if (!dirty_[v.id]) {
    dirty_[v.id] = 1;
    n.col_hint = true;
    n.changed_cols.clear();
  }
  if (n.col_hint && std::find(n.changed_cols.begin(), n.changed_cols.end(), col) ==
                        n.changed_cols.end())
    n.changed_cols.push_back(col);
  n.value[index] = value;
}

bool Graph::changed_columns(std::initializer_list<std::uint32_t> ids,
                            std::vector<std::uint32_t>& cols) const {
  if (!replaying_) return false;
  cols.clear();
  for (std::uint32_t id : ids) {
    if (!dirty_[id]) continue;
    const Node& n = nodes_[id];
    if (!n.col_hint) return false;
    cols.insert(cols.end(), n.changed_cols.begin(), n.changed_cols.end());
  }
  std::sort(cols.begin(), cols.end());
  cols.erase(std::unique(cols.begin(), cols.end()), cols.end());
  return true;
}

void Graph::mark_columns(std::uint32_t self, std::vector<std::uint32_t> cols) {
  nodes_[self].col_hint = true;
  nodes_[self].changed_cols = std::move(cols);
}

void Graph::propagate() {
  if (undo_.empty()) return;
  replaying_ = true;
  for (std::uint32_t id = first_dirty_ + 1; id < nodes_.size(); ++id) {
    Node& n = nodes_[id];
    if (dirty_[id] || !n.forward) continue;
    bool stale = false;
    for (std::uint32_t in : n.inputs) stale = stale || dirty_[in];
    if (!stale) continue;
    Saved saved{id, n.value, n.aux};
    n.col_hint = false;
    n.forward(*this, id);
    check_finite(n.op, n.value);
    if (n.value != saved.value) {
      dirty_[id] = 1;
      undo_.push_back(std::move(saved));
    } else {
      n.aux = std::move(saved.aux);
    }
  }
  replaying_ = false;
}

void Graph::revert() {
  for (auto it = undo_.rbegin(); it != undo_.rend(); ++it) {
    Node& n = nodes_[it->id];
    if (it->leaf) {
      n.value[it->index] = it->old;
    } else {
      n.value = std::move(it->value);
      n.aux = std::move(it->aux);
    }
    n.col_hint = false;
    dirty_[it->id] = 0;
  }
  undo_.clear();
}

Var Graph::add(Var a, Var b) {
  require(rows(a) == rows(b) && cols(a) == cols(b), "add", "shape mismatch");
  return push(
      "add", rows(a), cols(a), {a, b},
      [a, b](Graph& g, std::uint32_t self) {
        auto& out = g.nodes_[self].value;
        const auto& av = g.nodes_[a.id].value;
        const auto& bv = g.nodes_[b.id].value;
        std::vector<std::uint32_t> cols;
        if (g.changed_columns({a.id, b.id}, cols)) {
          const std::size_t m = g.nodes_[self].cols;
          for (std::size_t r = 0; r < out.size() / m; ++r)
            for (std::uint32_t c : cols) out[r * m + c] = av[r * m + c] + bv[r * m + c];
          g.mark_columns(self, std::move(cols));
          return;
        }
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
      },
      [a, b](Graph& g, std::uint32_t self) {
        const auto& gy = g.nodes_[self].grad;
        for (Var in : {a, b}) {
          if (!g.nodes_[in.id].requires_grad) continue;
          auto& gx = g.grad_buffer(in.id);
          for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
        }
      });
}

Var Graph::sub(Var a, Var b) {
  require(rows(a) == rows(b) && cols(a) == cols(b), "sub", "shape mismatch");
  return push(
      "sub", rows(a), cols(a), {a, b},
      [a, b](Graph& g, std::uint32_t self) {
        auto& out = g.nodes_[self].value;
        const auto& av = g.nodes_[a.id].value;
        const auto& bv = g.nodes_[b.id].value;
        std::vector<std::uint32_t> cols;
        if (g.changed_columns({a.id, b.id}, cols)) {
          const std::size_t m = g.nodes_[self].cols;
          for (std::size_t r = 0; r < out.size() / m; ++r)
            for (std::uint32_t c : cols) out[r * m + c] = av[r * m + c] - bv[r * m + c];
          g.mark_columns(self, std::move(cols));
          return;
        }
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
      },
      [a, b](Graph& g, std::uint32_t self) {
        const auto& gy = g.nodes_[self].grad;
        if (g.nodes_[a.id].requires_grad) {
          auto& ga = g.grad_buffer(a.id);
          for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
        }
        if (g.nodes_[b.id].requires_grad) {
          auto& gb = g.grad_buffer(b.id);
          for (std::size_t i = 0; i < gy.size(); ++i) gb[i] -= gy[i];
        }
      });
}

Var Graph::mul(Var a, Var b) {
  require(rows(a) == rows(b) && cols(a) == cols(b), "mul", "shape mismatch");
  return push(
      "mul", rows(a), cols(a), {a, b},
      [a, b](Graph& g, std::uint32_t self) {
        auto& out = g.nodes_[self].value;
        const auto& av = g.nodes_[a.id].value;
        const auto& bv = g.nodes_[b.id].value;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
      },
      [a, b](Graph& g, std::uint32_t self) {
        const auto& gy = g.nodes_[self].grad;
        if (g.nodes_[a.id].requires_grad) {
          auto& ga = g.grad_buffer(a.id);
          const auto& bv = g.nodes_[b.id].value;
          for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * bv[i];
        }
        if (g.nodes_[b.id].requires_grad) {
          auto& gb = g.grad_buffer(b.id);
          const auto& av = g.nodes_[a.id].value;
          for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * av[i];
        }
      });
}

Var Graph::scale(Var a, double c) {
  return push(
      "scale", rows(a), cols(a), {a},
      [a, c](Graph& g, std::uint32_t self) {
        auto& out = g.nodes_[self].value;
        const auto& av = g.nodes_[a.id].value;
        std::vector<std::uint32_t> cols;
        if (g.changed_columns({a.id}, cols)) {
          const std::size_t m = g.nodes_[self].cols;
          for (std::size_t r = 0; r < out.size() / m; ++r)
            for (std::uint32_t col : cols) out[r * m + col] = av[r * m + col] * c;
          g.mark_columns(self, std::move(cols));
          return;
        }
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
      },
      [a, c](Graph& g, std::uint32_t self) {
        const auto& gy = g.nodes_[self].grad;
        auto& ga = g.grad_buffer(a.id);
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * c;
      });
}

Var Graph::add_row(Var x, Var bias) {
  require(rows(bias) == 1 && cols(bias) == cols(x), "add_row", "bias must be [1, cols]");
  const std::size_t n = rows(x), m = cols(x);
  return push(
      "add_row", n, m, {x, bias},
      [x, bias, n, m](Graph& g, std::uint32_t self) {
        auto& out = g.nodes_[self].value;
        const auto& xv = g.nodes_[x.id].value;
        const auto& bv = g.nodes_[bias.id].value;
        std::vector<std::uint32_t> cols;
        if (g.changed_columns({x.id, bias.id}, cols)) {
          for (std::size_t r = 0; r < n; ++r)
            for (std::uint32_t c : cols) out[r * m + c] = xv[r * m + c] + bv[c];
          g.mark_columns(self, std::move(cols));
          return;
        }
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < m; ++c) out[r * m + c] = xv[r * m + c] + bv[c];
      },
      [x, bias, n, m](Graph& g, std::uint32_t self) {
        const auto& gy = g.nodes_[self].grad;
        if (g.nodes_[x.id].requires_grad) {
          auto& gx = g.grad_buffer(x.id);
          for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
        }
        if (g.nodes_[bias.id].requires_grad) {
          auto& gb = g.grad_buffer(bias.id);
          for (std::size_t c = 0; c < m; ++c) {
            double acc = 0.0;
            for (std::size_t r = 0; r < n; ++r) acc += gy[r * m + c];
            gb[c] += acc;
          }
        }
      });
}

Var Graph::matmul(Var a, Var b) {
  require(cols(a) == rows(b), "matmul", "inner dimensions differ");
  const kernels::MatmulShape s{rows(a), cols(a), cols(b)};
  return push(
      "matmul", s.n, s.m, {a, b},
      [a, b, s](Graph& g, std::uint32_t self) {
        const auto& av = g.nodes_[a.id].value;
        const auto& bv = g.nodes_[b.id].value;
        auto& out = g.nodes_[self].value;
        std::vector<std::uint32_t> cols;
        if (g.replaying_ && !g.dirty_[a.id] && g.changed_columns({b.id}, cols)) {
          // Same per-element order as the kernel.
          for (std::uint32_t j : cols)
            for (std::size_t r = 0; r < s.n; ++r) {
              double acc = 0.0;
              for (std::size_t p = 0; p < s.k; ++p) acc += av[r * s.k + p] * bv[p * s.m + j];
              out[r * s.m + j] = acc;
            }
          g.mark_columns(self, std::move(cols));
          return;
        }
        kernels::parallel::matmul(av, bv, out, s);
      },
      [a, b, s](Graph& g, std::uint32_t self) {
        const auto& gy = g.nodes_[self].grad;
        if (g.nodes_[a.id].requires_grad)
          kernels::parallel::matmul_grad_a(gy, g.nodes_[b.id].value, g.grad_buffer(a.id), s);
        if (g.nodes_[b.id].requires_grad)
          kernels::parallel::matmul_grad_b(g.nodes_[a.id].value, gy, g.grad_buffer(b.id), s);
      });
}

Var Graph::gather_rows(Var table, std::span<const int> ids) {
  const std::size_t vocab = rows(table), m = cols(table);
  for (int id : ids)
    require(id >= 0 && static_cast<std::size_t>(id) < vocab, "gather_rows", "index out of range");
  std::vector<int> saved(ids.begin(), ids.end());
  return push(
      "gather_rows", ids.size(), m, {table},
      [table, m, saved](Graph& g, std::uint32_t self) {
        auto& out = g.nodes_[self].value;
        const auto& tv = g.nodes_[table.id].value;
        for (std::size_t r = 0; r < saved.size(); ++r)
          std::copy_n(tv.begin() + saved[r] * m, m, out.begin() + r * m);
      },
      [table, m, saved](Graph& g, std::uint32_t self) {
        const auto& gy = g.nodes_[self].grad;
        auto& gt = g.grad_buffer(table.id);
        for (std::size_t r = 0; r < saved.size(); ++r)
          for (std::size_t c = 0; c < m; ++c) gt[saved[r] * m + c] += gy[r * m + c];
      });
}

Var Graph::select_rows(Var x, std::span<const std::size_t> picked) {
  const std::size_t n = rows(x), m = cols(x);
  for (std::size_t r : picked) require(r < n, "select_rows", "row out of range");
  std::vector<std::size_t> saved(picked.begin(), picked.end());
  return push(
      "select_rows", picked.size(), m, {x},
      [x, m, saved](Graph& g, std::uint32_t self) {
        auto& out = g.nodes_[self].value;
        const auto& xv = g.nodes_[x.id].value;
        for (std::size_t r = 0; r < saved.size(); ++r)
          std::copy_n(xv.begin() + saved[r] * m, m, out.begin() + r * m);
      },
      [x, m, saved](Graph& g, std::uint32_t self) {
        const auto& gy = g.nodes_[self].grad;
        auto& gx = g.grad_buffer(x.id);
        for (std::size_t r = 0; r < saved.size(); ++r)
          for (std::size_t c = 0; c < m; ++c) gx[saved[r] * m + c] += gy[r * m + c];
      });
}

Var Graph::gelu(Var x) {
  return push(
      "gelu", rows(x), cols(x), {x},
      [x](Graph& g, std::uint32_t self) {
        auto& out = g.nodes_[self].value;
        const auto& xv = g.nodes_[x.id].value;
        auto at = [&](std::size_t i) {
          const double v = xv[i];
          const double u = kGeluC * (v + kGeluA * v * v * v);
          out[i] = 0.5 * v * (1.0 + std::tanh(u));
        };
        std::vector<std::uint32_t> cols;
        if (g.changed_columns({x.id}, cols)) {
          const std::size_t m = g.nodes_[self].cols;
          for (std::size_t r = 0; r < out.size() / m; ++r)
            for (std::uint32_t c : cols) at(r * m + c);
          g.mark_columns(self, std::move(cols));
          return;
        }
        for (std::size_t i = 0; i < out.size(); ++i) at(i);
      },
      [x](Graph& g, std::uint32_t self) {
        const auto& gy = g.nodes_[self].grad;
        const auto& xv = g.nodes_[x.id].value;
        auto& gx = g.grad_buffer(x.id);
        for (std::size_t i = 0; i < gy.size(); ++i) {
          const double v = xv[i];
          const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
          const double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
          gx[i] += gy[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
        }
      });
}

// aux holds xhat ([n, m]) followed by the per-row reciprocal std ([n]).
Var Graph::layer_norm(Var x, Var gain, Var bias, double eps) {
  const std::size_t n = rows(x), m = cols(x);
  require(rows(gain) == 1 && cols(gain) == m && rows(bias) == 1 && cols(bias) == m,
          "layer_norm", "gain and bias must be [1, cols]");
  return push(
      "layer_norm", n, m, {x, gain, bias},
      [x, gain, bias, n, m, eps](Graph& g, std::uint32_t self) {
        Node& node = g.nodes_[self];
        const auto& xv = g.nodes_[x.id].value;
        const auto& gv = g.nodes_[gain.id].value;
        const auto& bv = g.nodes_[bias.id].value;
        node.aux.resize(n * m + n);
        double* xhat = node.aux.data();
        double* rstd = xhat + n * m;
        for (std::size_t r = 0; r < n; ++r) {
          const double* in = xv.data() + r * m;
          double mean = 0.0;
          for (std::size_t c = 0; c < m; ++c) mean += in[c];
          mean /= static_cast<double>(m);
          double var = 0.0;
          for (std::size_t c = 0; c < m; ++c) var += (in[c] - mean) * (in[c] - mean);
          var /= static_cast<double>(m);
          rstd[r] = 1.0 / std::sqrt(var + eps);
          for (std::size_t c = 0; c < m; ++c) {
            xhat[r * m + c] = (in[c] - mean) * rstd[r];
            node.value[r * m + c] = xhat[r * m + c] * gv[c] + bv[c];
          }
        }
      },
      [x, gain, bias, n, m](Graph& g, std::uint32_t self) {
        const auto& gy = g.nodes_[self].grad;
        const double* xhat = g.nodes_[self].aux.data();
        const double* rstd = xhat + n * m;
        if (g.nodes_[gain.id].requires_grad) {
          auto& gg = g.grad_buffer(gain.id);
          for (std::size_t c = 0; c < m; ++c) {
            double acc = 0.0;
            for (std::size_t r = 0; r < n; ++r) acc += gy[r * m + c] * xhat[r * m + c];
            gg[c] += acc;
          }
        }
        if (g.nodes_[bias.id].requires_grad) {
          auto& gb = g.grad_buffer(bias.id);
          for (std::size_t c = 0; c < m; ++c) {
            double acc = 0.0;
            for (std::size_t r = 0; r < n; ++r) acc += gy[r * m + c];
            gb[c] += acc;
          }
        }
        if (g.nodes_[x.id].requires_grad) {
          const auto& gv = g.nodes_[gain.id].value;
          auto& gx = g.grad_buffer(x.id);
          std::vector<double> dxhat(m);
          for (std::size_t r = 0; r < n; ++r) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t c = 0; c < m; ++c) {
              dxhat[c] = gy[r * m + c] * gv[c];
              mean_d += dxhat[c];
              mean_dx += dxhat[c] * xhat[r * m + c];
            }
            mean_d /= static_cast<double>(m);
            mean_dx /= static_cast<double>(m);
            for (std::size_t c = 0; c < m; ++c)
              gx[r * m + c] += rstd[r] * (dxhat[c] - mean_d - xhat[r * m + c] * mean_dx);
          }
        }
      });
}

Var Graph::log_softmax(Var x) {
  const std::size_t n = rows(x), m = cols(x);
  return push(
      "log_softmax", n, m, {x},
      [x, n, m](Graph& g, std::uint32_t self) {
        kernels::parallel::log_softmax_rows(g.nodes_[x.id].value, g.nodes_[self].value, n, m);
      },
      [x, n, m](Graph& g, std::uint32_t self) {
        const auto& gy = g.nodes_[self].grad;
        const auto& y = g.nodes_[self].value;
        auto& gx = g.grad_buffer(x.id);
        for (std::size_t r = 0; r < n; ++r) {
          double total = 0.0;
          for (std::size_t c = 0; c < m; ++c) total += gy[r * m + c];
          for (std::size_t c = 0; c < m; ++c)
            gx[r * m + c] += gy[r * m + c] - std::exp(y[r * m + c]) * total;
        }
      });
}

Var Graph::pick(Var x, std::span<const int> picked) {
  const std::size_t n = rows(x), m = cols(x);
  require(picked.size() == n, "pick", "one column per row required");
  for (int c : picked)
    require(c >= 0 && static_cast<std::size_t>(c) < m, "pick", "column out of range");
  std::vector<int> saved(picked.begin(), picked.end());
  return push(
      "pick", n, 1, {x},
      [x, m, saved](Graph& g, std::uint32_t self) {
        auto& out = g.nodes_[self].value;
        const auto& xv = g.nodes_[x.id].value;
        for (std::size_t r = 0; r < saved.size(); ++r) out[r] = xv[r * m + saved[r]];
      },
      [x, m, saved](Graph& g, std::uint32_t self) {
        const auto& gy = g.nodes_[self].grad;
        auto& gx = g.grad_buffer(x.id);
        for (std::size_t r = 0; r < saved.size(); ++r) gx[r * m + saved[r]] += gy[r];
      });
}

// aux holds the attention probabilities.
Var Graph::causal_attention(Var qkv, std::size_t batch, std::size_t seq_len,
                            std::size_t heads) {
  require(heads > 0 && cols(qkv) % (3 * heads) == 0, "causal_attention",
          "qkv width must be 3 * heads * head_dim");
  require(rows(qkv) == batch * seq_len, "causal_attention", "rows must equal batch * seq_len");
  const kernels::AttentionShape s{batch, seq_len, heads, cols(qkv) / (3 * heads)};
  return push(
      "causal_attention", s.rows(), s.width(), {qkv},
      [qkv, s](Graph& g, std::uint32_t self) {
        Node& node = g.nodes_[self];
        node.aux.resize(s.probs_size());
        kernels::parallel::attention_forward(g.nodes_[qkv.id].value, node.value, node.aux, s);
      },
      [qkv, s](Graph& g, std::uint32_t self) {
        kernels::parallel::attention_backward(g.nodes_[qkv.id].value, g.nodes_[self].aux,
                                              g.nodes_[self].grad, g.grad_buffer(qkv.id), s);
      });
}

Var Graph::range_sum(Var x, std::size_t begin, std::size_t end) {
  require(begin <= end && end <= nodes_[x.id].value.size(), "range_sum", "range out of bounds");
  return push(
      "range_sum", 1, 1, {x},
      [x, begin, end](Graph& g, std::uint32_t self) {
        const auto& xv = g.nodes_[x.id].value;
        double acc = 0.0;
        for (std::size_t i = begin; i < end; ++i) acc += xv[i];
        g.nodes_[self].value[0] = acc;
      },
      [x, begin, end](Graph& g, std::uint32_t self) {
        const double gy = g.nodes_[self].grad[0];
        auto& gx = g.grad_buffer(x.id);
        for (std::size_t i = begin; i < end; ++i) gx[i] += gy;
      });
}

Var Graph::softplus(Var x) {
  return push(
      "softplus", rows(x), cols(x), {x},
      [x](Graph& g, std::uint32_t self) {
        auto& out = g.nodes_[self].value;
        const auto& xv = g.nodes_[x.id].value;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = diff::softplus(xv[i]);
      },
      [x](Graph& g, std::uint32_t self) {
        const auto& gy = g.nodes_[self].grad;
        const auto& xv = g.nodes_[x.id].value;
        auto& gx = g.grad_buffer(x.id);
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * sigmoid(xv[i]);
      });
}

Var Graph::sum(std::span<const Var> terms) {
  std::vector<std::uint32_t> ids;
  for (Var t : terms) {
    require(nodes_[t.id].value.size() == 1, "sum", "terms must be [1, 1]");
    ids.push_back(t.id);
  }
  return push(
      "sum", 1, 1, ids,
      [ids](Graph& g, std::uint32_t self) {
        double acc = 0.0;
        for (std::uint32_t t : ids) acc += g.nodes_[t].value[0];
        g.nodes_[self].value[0] = acc;
      },
      [ids](Graph& g, std::uint32_t self) {
        const double gy = g.nodes_[self].grad[0];
        for (std::uint32_t t : ids)
          if (g.nodes_[t].requires_grad) g.grad_buffer(t)[0] += gy;
      });
}

Var Graph::mean(std::span<const Var> terms) {
  require(!terms.empty(), "mean", "no terms");
  std::vector<std::uint32_t> ids;
  for (Var t : terms) {
    require(nodes_[t.id].value.size() == 1, "mean", "terms must be [1, 1]");
    ids.push_back(t.id);
  }
  const double n = static_cast<double>(ids.size());
  return push(
      "mean", 1, 1, ids,
      [ids, n](Graph& g, std::uint32_t self) {
        double acc = 0.0;
        for (std::uint32_t t : ids) acc += g.nodes_[t].value[0];
        g.nodes_[self].value[0] = acc / n;
      },
      [ids, n](Graph& g, std::uint32_t self) {
        const double gy = g.nodes_[self].grad[0] / n;
        for (std::uint32_t t : ids)
          if (g.nodes_[t].requires_grad) g.grad_buffer(t)[0] += gy;
      });
}

namespace {

std::vector<Var> add_params(Graph& g, const ParamSet& params, bool requires_grad) {
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const auto& p : params) leaves.push_back(g.param(p, requires_grad));
  return leaves;
}

void copy_gradients(Graph& g, std::span<const Var> leaves, const ParamSet& params,
                    GradientMap& out) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto grad = g.grad(leaves[i]);
    check_finite("gradient of " + params[i].name, grad);
    std::copy(grad.begin(), grad.end(), out[i].values.begin());
  }
}

void require_epsilon(double epsilon) {
  if (!(epsilon > 0.0) || !std::isfinite(epsilon))
    throw UsageError("grad_check: epsilon must be a positive finite number");
}

}  // namespace

Evaluation evaluate_with_gradients(const Computation& f, const ParamSet& params) {
  Graph g;
  const std::vector<Var> leaves = add_params(g, params, true);
  const Var out = f(g, leaves);
  Evaluation result;
  result.value = g.scalar(out);
  g.backward(out);
  result.gradients = params.zeros_like();
  copy_gradients(g, leaves, params, result.gradients);
  return result;
}

double evaluate(const Computation& f, const ParamSet& params) {
  Graph g;
  const std::vector<Var> leaves = add_params(g, params, false);
  return g.scalar(f(g, leaves));
}

std::vector<GradCheckReport> grad_check_combinations(const MultiComputation& f,
                                                     const ParamSet& params,
                                                     std::span<const std::vector<double>> combos,
                                                     double epsilon) {
  require_epsilon(epsilon);
  Graph g;
  const std::vector<Var> leaves = add_params(g, params, true);
  const std::vector<Var> outputs = f(g, leaves);
  const std::size_t n_out = outputs.size();
  for (const auto& combo : combos)
    require(combo.size() == n_out, "grad_check", "one coefficient per output required");

  // Analytic gradient of every output, then of every combination.
  std::vector<GradientMap> per_output(n_out, params.zeros_like());
  for (std::size_t k = 0; k < n_out; ++k) {
    g.zero_grads();
    g.backward(outputs[k]);
    copy_gradients(g, leaves, params, per_output[k]);
  }
  g.zero_grads();

  const std::size_t n_combo = combos.size();
  struct Sums {
    double diff_sq = 0.0, analytic_sq = 0.0, numeric_sq = 0.0;
  };
  // Central differences of every output for every scalar parameter. Threads
  // replay private copies of the graph over disjoint parameter ranges.
  std::vector<std::size_t> offset(params.size() + 1, 0);
  for (std::size_t t = 0; t < params.size(); ++t) offset[t + 1] = offset[t] + params[t].size();
  const long total = static_cast<long>(offset.back());
  std::vector<double> numeric(offset.back() * n_out);
#pragma omp parallel
  {
    Graph local = g.clone();
    std::vector<double> up(n_out);
#pragma omp for schedule(dynamic, 256)
    for (long flat = 0; flat < total; ++flat) {
      const auto at = static_cast<std::size_t>(flat);
      const auto t = static_cast<std::size_t>(
          std::upper_bound(offset.begin(), offset.end(), at) - offset.begin() - 1);
      const std::size_t i = at - offset[t];
      const double original = params[t].values[i];
      local.set_leaf(leaves[t], i, original + epsilon);
      local.propagate();
      for (std::size_t k = 0; k < n_out; ++k) up[k] = local.scalar(outputs[k]);
      local.revert();
      local.set_leaf(leaves[t], i, original - epsilon);
      local.propagate();
      for (std::size_t k = 0; k < n_out; ++k)
        numeric[at * n_out + k] = (up[k] - local.scalar(outputs[k])) / (2.0 * epsilon);
      local.revert();
    }
  }

  std::vector<GradCheckReport> reports(n_combo);
  for (std::size_t t = 0; t < params.size(); ++t) {
    std::vector<Sums> sums(n_combo);
    for (std::size_t i = 0; i < params[t].size(); ++i) {
      const double* fd = &numeric[(offset[t] + i) * n_out];
      for (std::size_t c = 0; c < n_combo; ++c) {
        double a = 0.0, num = 0.0;
        for (std::size_t k = 0; k < n_out; ++k) {
          a += combos[c][k] * per_output[k][t].values[i];
          num += combos[c][k] * fd[k];
        }
        sums[c].diff_sq += (a - num) * (a - num);
        sums[c].analytic_sq += a * a;
        sums[c].numeric_sq += num * num;
      }
    }
    for (std::size_t c = 0; c < n_combo; ++c) {
      const double err =
          std::sqrt(sums[c].diff_sq) /
          std::max(1e-12, std::sqrt(sums[c].analytic_sq) + std::sqrt(sums[c].numeric_sq));
      GradCheckReport& report = reports[c];
      report.relative_errors.push_back(err);
      if (err >= report.max_relative_error) {
        report.max_relative_error = err;
        report.worst_param = params[t].name;
      }
    }
  }
  return reports;
}

GradCheckReport grad_check_report(const Computation& f, const ParamSet& params,
                                  double epsilon) {
  const MultiComputation single = [&f](Graph& g, std::span<const Var> leaves) {
    return std::vector<Var>{f(g, leaves)};
  };
  const std::vector<double> identity{1.0};
  return grad_check_combinations(single, params, std::span(&identity, 1), epsilon).front();
}

double grad_check(const Computation& f, const ParamSet& params, double epsilon) {
  return grad_check_report(f, params, epsilon).max_relative_error;
}

}  // namespace hipo::diff
