#include "fedgin/params.hpp"

#include <algorithm>
#include <stdexcept>

namespace fedgin {

void ModelParams::add(std::string name, Tensor tensor) {
  if (!tensor.defined()) throw std::invalid_argument("ModelParams: undefined tensor for '" + name + "'");
  if (index_.contains(name)) throw std::invalid_argument("ModelParams: duplicate parameter name '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.push_back({std::move(name), std::move(tensor)});
}

bool ModelParams::contains(std::string_view name) const { return index_.contains(std::string(name)); }

const Tensor& ModelParams::at(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw std::out_of_range("ModelParams: no parameter named '" + std::string(name) + "'");
  return entries_[it->second].tensor;
}

Tensor& ModelParams::at(std::string_view name) {
  return const_cast<Tensor&>(static_cast<const ModelParams&>(*this).at(name));
}

ModelParams ModelParams::clone() const {
  ModelParams out;
  for (const auto& e : entries_) out.add(e.name, e.tensor.clone());
  return out;
}

bool ModelParams::congruent_with(const ModelParams& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name != other.entries_[i].name) return false;
    if (entries_[i].tensor.shape() != other.entries_[i].tensor.shape()) return false;
  }
  return true;
}

void ModelParams::assign_values(const ModelParams& other) {
  if (!congruent_with(other)) throw std::invalid_argument("ModelParams::assign_values: parameter sets differ");
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    auto src = other.entries_[i].tensor.data();
    auto dst = entries_[i].tensor.mutable_data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

void ModelParams::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

std::int64_t ModelParams::element_count() const {
  std::int64_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

std::int64_t ModelParams::trainable_element_count() const {
  std::int64_t n = 0;
  for (const auto& e : entries_)
    if (e.tensor.requires_grad()) n += e.tensor.numel();
  return n;
}

bool bitwise_equal(const ModelParams& a, const ModelParams& b) {
  if (!a.congruent_with(b)) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!bitwise_equal(a.entries()[i].tensor, b.entries()[i].tensor)) return false;
  }
  return true;
}

}  // namespace fedgin
