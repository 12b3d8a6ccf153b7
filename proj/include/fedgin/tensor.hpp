#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedgin {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised whenever an op would emit NaN or Inf, in values or gradients.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Mode { Train, Eval };

namespace detail {

struct Node {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0f);
  }
};

}  // namespace detail

/// Graph recording is thread-local; a guard disables it for inference.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Dense row-major float tensor with an optional gradient slot.
///
/// Tensor is a handle: copies share storage, `clone()` makes a deep copy.
/// Results of ops record their inputs while grad mode is on and any input
/// requires a gradient; `backward()` on a scalar result then accumulates
/// d(result)/d(leaf) into every reachable leaf's gradient buffer.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<float> data, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  [[nodiscard]] bool defined() const { return node_ != nullptr; }
  [[nodiscard]] const Shape& shape() const;
  [[nodiscard]] std::int64_t dim(std::size_t i) const;
  [[nodiscard]] std::size_t ndim() const { return shape().size(); }
  [[nodiscard]] std::int64_t numel() const;

  [[nodiscard]] std::span<const float> data() const;
  /// Writable view. Only for leaves owned by the caller (init, optimizer).
  [[nodiscard]] std::span<float> mutable_data();
  [[nodiscard]] bool has_grad() const;
  [[nodiscard]] std::span<const float> grad() const;
  [[nodiscard]] std::span<float> mutable_grad();
  void zero_grad();

  [[nodiscard]] bool requires_grad() const;
  void set_requires_grad(bool value);
  [[nodiscard]] float item() const;
  [[nodiscard]] float at(std::initializer_list<std::int64_t> index) const;

  [[nodiscard]] Tensor clone() const;
  /// Same values, new leaf without history.
  [[nodiscard]] Tensor detach() const;

  void backward();

  [[nodiscard]] const char* op_name() const;

  // Op construction helpers.
  using BackwardFn = std::function<void(detail::Node&)>;
  static Tensor make_result(const char* op, Shape shape, std::vector<float> data,
                            std::vector<Tensor> inputs, BackwardFn backward);
  [[nodiscard]] detail::Node* node() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

void check_finite(std::span<const float> values, const std::string& what);

/// Elementwise equality of shape and bits.
bool bitwise_equal(const Tensor& a, const Tensor& b);

}  // namespace fedgin
