// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace hipo {

// A named, dense, row-major tensor of doubles. Values are kept f32-representable
// by the trainer so checkpoints round-trip exactly.
struct ParamTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
  // Leading extent for 2-d tensors, 1 otherwise.
  std::size_t rows() const { return shape.size() == 2 ? shape[0] : 1; }
  std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }
};

std::size_t shape_product(const std::vector<std::size_t>& shape);

// Ordered collection of parameter tensors with name lookup. Order is the
// serialization and iteration order everywhere.
class ParamSet {
 public:
  ParamSet() = default;

  // Throws UsageError on duplicate names, bad shapes or non-finite values.
  std::size_t add(ParamTensor tensor);

  std::size_t size() const { return tensors_.size(); }
  bool empty() const { return tensors_.empty(); }
  const ParamTensor& operator[](std::size_t i) const { return tensors_[i]; }
  ParamTensor& operator[](std::size_t i) { return tensors_[i]; }
  const ParamTensor& at(std::string_view name) const;
  ParamTensor& at(std::string_view name);
  bool contains(std::string_view name) const;
  std::size_t index_of(std::string_view name) const;

  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }
  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }

  std::size_t scalar_count() const;

  // Same names and shapes, all values zero.
  ParamSet zeros_like() const;
  bool same_layout(const ParamSet& other) const;

  friend bool operator==(const ParamSet& a, const ParamSet& b);

 private:
  std::vector<ParamTensor> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Gradients share the parameter layout.
using GradientMap = ParamSet;

// Round every value to the nearest float.
void round_to_f32(ParamSet& params);

}  // namespace hipo
