#pragma once

#include "fedgin/tensor.hpp"

#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace fedgin {

/// Ordered, uniquely named collection of weight tensors. Running statistics
/// of batch norm live here too (with requires_grad == false), so they travel
/// through serialization and aggregation together with the weights.
class ModelParams {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
  };

  void add(std::string name, Tensor tensor);

  [[nodiscard]] bool contains(std::string_view name) const;
  [[nodiscard]] const Tensor& at(std::string_view name) const;
  [[nodiscard]] Tensor& at(std::string_view name);

  [[nodiscard]] std::size_t size() const { return entries_.size(); }
  [[nodiscard]] bool empty() const { return entries_.empty(); }
  [[nodiscard]] const std::vector<Entry>& entries() const { return entries_; }
  [[nodiscard]] std::vector<Entry>& entries() { return entries_; }

  /// Deep copy preserving names, order and requires_grad flags.
  [[nodiscard]] ModelParams clone() const;
  /// Same names in the same order with identical shapes.
  [[nodiscard]] bool congruent_with(const ModelParams& other) const;
  /// Copy values from `other` (must be congruent) into this collection's storage.
  void assign_values(const ModelParams& other);
  void zero_grad();

  [[nodiscard]] std::int64_t element_count() const;
  [[nodiscard]] std::int64_t trainable_element_count() const;

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

bool bitwise_equal(const ModelParams& a, const ModelParams& b);

}  // namespace fedgin
