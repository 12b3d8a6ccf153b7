#pragma once

#include "fedgin/rng.hpp"
#include "fedgin/tensor.hpp"

#include <optional>
#include <vector>

namespace fedgin {

/// Architecture of the random shallow network used for intensity augmentation.
struct GinConfig {
  bool enabled = true;
  int num_layers = 4;
  int hidden_channels = 8;
  int kernel_size = 3;
  float leaky_slope = 0.2f;
  /// Draw a separate network and alpha for every sample of a batch instead
  /// of one per batch.
  bool per_sample = true;
  /// Test hook: when set, every sampled network uses this blend coefficient.
  std::optional<float> fixed_alpha;

  void validate() const;
  static GinConfig disabled() {
    GinConfig c;
    c.enabled = false;
    return c;
  }
};

/// One freshly sampled augmentation network. Layer i maps
/// channels[i] -> channels[i+1] with same padding and stride 1.
struct GinNetwork {
  std::vector<Tensor> weights;
  std::vector<Tensor> biases;
  float alpha = 0.0f;
};

GinNetwork gin_sample(const GinConfig& config, std::int64_t channels, RngStream& rng);

/// Raw network output g_net(x) (no blending), with leaky ReLU between layers.
Tensor gin_network_forward(const Tensor& x, const GinNetwork& net, const GinConfig& config);

/// alpha * g_net(x) + (1 - alpha) * x, rescaled per sample to the input's
/// Frobenius norm (over C*H*W). Runs without recording gradients; the result
/// is a fresh leaf.
///
/// A sample whose blended output has zero norm is retried once with a network
/// drawn from `resample_rng`; if it is still zero (or no stream is given) the
/// sample is passed through unchanged and a warning is logged.
Tensor gin_apply(const Tensor& x, const GinNetwork& net, const GinConfig& config,
                 RngStream* resample_rng = nullptr);

/// Samples a network from `rng` and applies it to the batch, or one network
/// per sample when `config.per_sample` is set.
Tensor gin_augment(const Tensor& x, const GinConfig& config, RngStream& rng);

}  // namespace fedgin
