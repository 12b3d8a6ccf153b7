#pragma once

#include "fedgin/params.hpp"
#include "fedgin/rng.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace fedgin {

struct AdamWConfig {
  double learning_rate = 5e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Moments are kept in double, keyed by parameter name.
struct OptimizerState {
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };
  AdamWConfig config;
  std::int64_t step = 0;
  std::map<std::string, Moments> moments;
};

class NonFiniteGradientError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One AdamW step over every trainable parameter that holds a gradient:
///   theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
/// Parameters are validated before any of them is modified.
void adamw_step(ModelParams& params, OptimizerState& state);

/// He-normal initialization: N(0, 2 / ((1 + slope^2) * fan_in)).
Tensor kaiming_init(const Shape& shape, std::int64_t fan_in, float slope, RngStream& rng);

struct PlateauConfig {
  bool enabled = true;
  double factor = 0.5;
  int patience = 5;
  double min_delta = 1e-4;
  double min_lr = 1e-6;
};

/// Reduce-on-plateau for a metric where larger is better (validation Dice).
class PlateauScheduler {
 public:
  PlateauScheduler(PlateauConfig config, double initial_lr);

  /// Records one evaluation and returns the learning rate to use next.
  double step(double metric);

  [[nodiscard]] double learning_rate() const { return lr_; }
  [[nodiscard]] int bad_evaluations() const { return bad_; }
  [[nodiscard]] double best() const { return best_; }
  [[nodiscard]] const PlateauConfig& config() const { return config_; }

 private:
  PlateauConfig config_;
  double lr_;
  double best_;
  int bad_ = 0;
};

}  // namespace fedgin
