#include "fedgin/optim.hpp"

#include <cmath>
#include <limits>

namespace fedgin {

void adamw_step(ModelParams& params, OptimizerState& state) {
  for (const auto& e : params.entries()) {
    if (!e.tensor.requires_grad() || !e.tensor.has_grad()) continue;
    if (e.tensor.grad().size() != e.tensor.data().size()) {
      throw ShapeError("adamw_step: gradient of '" + e.name + "' is not shape-congruent with its parameter");
    }
    for (float g : e.tensor.grad()) {
      if (!std::isfinite(g)) throw NonFiniteGradientError("adamw_step: non-finite gradient in parameter '" + e.name + "'");
    }
  }

  const AdamWConfig& c = state.config;
  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (auto& e : params.entries()) {
    if (!e.tensor.requires_grad() || !e.tensor.has_grad()) continue;
    auto& mom = state.moments[e.name];
    auto theta = e.tensor.mutable_data();
    auto grad = e.tensor.grad();
    if (mom.m.empty()) {
      mom.m.assign(theta.size(), 0.0);
      mom.v.assign(theta.size(), 0.0);
    }
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double g = grad[i];
      mom.m[i] = c.beta1 * mom.m[i] + (1.0 - c.beta1) * g;
      mom.v[i] = c.beta2 * mom.v[i] + (1.0 - c.beta2) * g * g;
      const double mhat = mom.m[i] / bc1;
      const double vhat = mom.v[i] / bc2;
      const double t = theta[i];
      theta[i] = static_cast<float>(t - c.learning_rate * (mhat / (std::sqrt(vhat) + c.epsilon) + c.weight_decay * t));
    }
    check_finite(theta, "parameter '" + e.name + "' after AdamW step");
  }
}

Tensor kaiming_init(const Shape& shape, std::int64_t fan_in, float slope, RngStream& rng) {
  if (fan_in < 1) throw std::invalid_argument("kaiming_init: fan_in must be >= 1");
  const double stddev = std::sqrt(2.0 / ((1.0 + static_cast<double>(slope) * slope) * static_cast<double>(fan_in)));
  auto t = Tensor::zeros(shape, true);
  for (auto& v : t.mutable_data()) v = static_cast<float>(rng.normal() * stddev);
  return t;
}

PlateauScheduler::PlateauScheduler(PlateauConfig config, double initial_lr)
    : config_(config), lr_(initial_lr), best_(-std::numeric_limits<double>::infinity()) {}

double PlateauScheduler::step(double metric) {
  if (!config_.enabled) return lr_;
  if (metric > best_ + config_.min_delta) {
    best_ = metric;
    bad_ = 0;
    return lr_;
  }
  if (++bad_ >= config_.patience) {
    lr_ = std::max(lr_ * config_.factor, config_.min_lr);
    bad_ = 0;
  }
  return lr_;
}

}  // namespace fedgin
