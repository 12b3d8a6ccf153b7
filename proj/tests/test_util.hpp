#pragma once

#include "fedgin/ops.hpp"
#include "fedgin/rng.hpp"
#include "fedgin/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace testutil {

using namespace fedgin;

inline Tensor random_tensor(const Shape& shape, RngStream& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = true) {
  std::vector<float> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi));
  return Tensor::from_data(shape, std::move(v), requires_grad);
}

/// Values in [lo,hi] with random sign, kept away from zero (kinks of leaky ReLU).
inline Tensor away_from_zero(const Shape& shape, RngStream& rng, double lo = 0.1, double hi = 1.0) {
  std::vector<float> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi) * (rng.uniform() < 0.5 ? -1.0 : 1.0));
  return Tensor::from_data(shape, std::move(v), true);
}

struct GradCheck {
  double max_error = 0.0;  // |a - n| / max(|a|, |n|, 1)
  double max_abs = 0.0;
  std::size_t checked = 0;
};

/// Compares backward() against central differences of <w, f(inputs)> where w
/// is a fixed random projection. The projection is summed in double so the
/// only rounding left is in the op's float outputs.
inline GradCheck grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f, std::vector<Tensor> inputs,
                            double h = 1e-3, std::uint64_t seed = 99) {
  RngStream wrng(seed);
  Tensor out = f(inputs);
  std::vector<float> w(static_cast<std::size_t>(out.numel()));
  for (auto& x : w) x = static_cast<float>(wrng.uniform(-1.0, 1.0));
  const Tensor wt = Tensor::from_data(out.shape(), w);

  for (auto& t : inputs) t.zero_grad();
  Tensor loss = sum(mul(out, wt));
  loss.backward();
  std::vector<std::vector<float>> analytic;
  for (auto& t : inputs) {
    analytic.emplace_back(t.has_grad() ? std::vector<float>(t.grad().begin(), t.grad().end())
                                       : std::vector<float>(static_cast<std::size_t>(t.numel()), 0.0f));
  }

  auto objective = [&] {
    NoGradGuard ng;
    Tensor o = f(inputs);
    double s = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) s += static_cast<double>(w[i]) * o.data()[i];
    return s;
  };
  GradCheck r;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    if (!inputs[t].requires_grad()) continue;
    auto d = inputs[t].mutable_data();
    for (std::size_t k = 0; k < d.size(); ++k) {
      const float orig = d[k];
      const float up = orig + static_cast<float>(h), dn = orig - static_cast<float>(h);
      d[k] = up;
      const double fu = objective();
      d[k] = dn;
      const double fd = objective();
      d[k] = orig;
      const double numeric = (fu - fd) / (static_cast<double>(up) - static_cast<double>(dn));
      const double a = analytic[t][k];
      const double abs_err = std::abs(a - numeric);
      r.max_abs = std::max(r.max_abs, abs_err);
      r.max_error = std::max(r.max_error, abs_err / std::max({std::abs(a), std::abs(numeric), 1.0}));
      ++r.checked;
    }
  }
  return r;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("fedgin_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testutil
