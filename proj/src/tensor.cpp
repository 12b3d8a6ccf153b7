#include "fedgin/tensor.hpp"

#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace fedgin {

namespace {
thread_local bool t_grad_enabled = true;

std::shared_ptr<detail::Node> make_node(Shape shape, std::vector<float> data, bool rg) {
  if (static_cast<std::int64_t>(data.size()) != shape_numel(shape)) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->requires_grad = rg;
  return n;
}
}  // namespace

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

void check_finite(std::span<const float> values, const std::string& what) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NonFiniteError("non-finite value " + std::to_string(values[i]) + " at element " +
                           std::to_string(i) + " of " + what);
    }
  }
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0f, requires_grad); }

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(make_node(std::move(shape), std::vector<float>(static_cast<std::size_t>(n), value),
                          requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<float> data, bool requires_grad) {
  check_finite(data, "Tensor::from_data");
  return Tensor(make_node(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(float value, bool requires_grad) { return from_data({}, {value}, requires_grad); }

const Shape& Tensor::shape() const {
  if (!node_) throw std::logic_error("use of undefined tensor");
  return node_->shape;
}

std::int64_t Tensor::dim(std::size_t i) const {
  const auto& s = shape();
  if (i >= s.size()) throw ShapeError("dimension index out of range for shape " + shape_str(s));
  return s[i];
}

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(node_ ? node_->data.size() : 0); }

std::span<const float> Tensor::data() const {
  if (!node_) throw std::logic_error("use of undefined tensor");
  return node_->data;
}

std::span<float> Tensor::mutable_data() {
  if (!node_) throw std::logic_error("use of undefined tensor");
  return node_->data;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const float> Tensor::grad() const {
  if (!node_) throw std::logic_error("use of undefined tensor");
  return node_->grad;
}

std::span<float> Tensor::mutable_grad() {
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
void Tensor::set_requires_grad(bool value) { node_->requires_grad = value; }

float Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

float Tensor::at(std::initializer_list<std::int64_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw ShapeError("index rank mismatch for shape " + shape_str(s));
  std::int64_t off = 0;
  std::size_t k = 0;
  for (auto i : index) {
    if (i < 0 || i >= s[k]) throw ShapeError("index out of range for shape " + shape_str(s));
    off = off * s[k] + i;
    ++k;
  }
  return node_->data[static_cast<std::size_t>(off)];
}

Tensor Tensor::clone() const {
  auto n = make_node(shape(), node_->data, node_->requires_grad);
  return Tensor(std::move(n));
}

Tensor Tensor::detach() const { return Tensor(make_node(shape(), node_->data, false)); }

const char* Tensor::op_name() const { return node_ ? node_->op : "undefined"; }

Tensor Tensor::make_result(const char* op, Shape shape, std::vector<float> data,
                           std::vector<Tensor> inputs, BackwardFn backward) {
  check_finite(data, std::string("output of ") + op);
  auto n = make_node(std::move(shape), std::move(data), false);
  n->op = op;
  if (t_grad_enabled) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any && backward) {
      n->requires_grad = true;
      n->backward = std::move(backward);
      n->inputs.reserve(inputs.size());
      for (auto& in : inputs) n->inputs.push_back(in.node_);
    }
  }
  return Tensor(std::move(n));
}

void Tensor::backward() {
  if (numel() != 1) throw ShapeError("backward() requires a scalar, got shape " + shape_str(shape()));
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      detail::Node* child = n->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->ensure_grad();
  node_->grad[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (!n->backward || n->grad.empty()) continue;
    check_finite(n->grad, std::string("gradient of ") + n->op);
    n->backward(*n);
  }
  // Release the graph; leaves keep their accumulated gradients.
  for (detail::Node* n : order) {
    if (n->backward) {
      n->backward = nullptr;
      n->inputs.clear();
    }
  }
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  auto da = a.data();
  auto db = b.data();
  return std::memcmp(da.data(), db.data(), da.size() * sizeof(float)) == 0;
}

}  // namespace fedgin
