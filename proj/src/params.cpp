// SPDX-License-Identifier: Apache-2.0

#include "hipo/params.hpp"

#include <cmath>

#include "hipo/error.hpp"

namespace hipo {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t extent : shape) n *= extent;
  return n;
}

std::size_t ParamSet::add(ParamTensor tensor) {
  if (tensor.name.empty()) throw UsageError("parameter name must be non-empty");
  if (index_.count(tensor.name)) throw UsageError("duplicate parameter name: " + tensor.name);
  if (tensor.shape.empty() || tensor.shape.size() > 2)
    throw UsageError("parameter " + tensor.name + " must be 1-d or 2-d");
  for (std::size_t extent : tensor.shape)
    if (extent == 0) throw UsageError("parameter " + tensor.name + " has a zero extent");
  if (shape_product(tensor.shape) != tensor.values.size())
    throw UsageError("parameter " + tensor.name + " value count does not match its shape");
  for (double v : tensor.values)
    if (!std::isfinite(v)) throw NumericError("parameter " + tensor.name);
  const std::size_t i = tensors_.size();
  index_.emplace(tensor.name, i);
  tensors_.push_back(std::move(tensor));
  return i;
}

std::size_t ParamSet::index_of(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw UsageError("unknown parameter: " + std::string(name));
  return it->second;
}

const ParamTensor& ParamSet::at(std::string_view name) const { return tensors_[index_of(name)]; }
ParamTensor& ParamSet::at(std::string_view name) { return tensors_[index_of(name)]; }

bool ParamSet::contains(std::string_view name) const {
  return index_.count(std::string(name)) != 0;
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.size();
  return n;
}

ParamSet ParamSet::zeros_like() const {
  ParamSet out;
  for (const auto& t : tensors_)
    out.add(ParamTensor{t.name, t.shape, std::vector<double>(t.size(), 0.0)});
  return out;
}

bool ParamSet::same_layout(const ParamSet& other) const {
  if (size() != other.size()) return false;
  for (std::size_t i = 0; i < size(); ++i) {
    if (tensors_[i].name != other.tensors_[i].name) return false;
    if (tensors_[i].shape != other.tensors_[i].shape) return false;
  }
  return true;
}

bool operator==(const ParamSet& a, const ParamSet& b) {
  if (!a.same_layout(b)) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a.tensors_[i].values != b.tensors_[i].values) return false;
  return true;
}

void round_to_f32(ParamSet& params) {
  for (auto& t : params)
    for (double& v : t.values) v = static_cast<double>(static_cast<float>(v));
}

}  // namespace hipo
