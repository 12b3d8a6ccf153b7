#pragma once

#include "fedgin/ops.hpp"
#include "fedgin/params.hpp"
#include "fedgin/rng.hpp"

namespace fedgin {

struct UNetConfig {
  int in_channels = 1;
  int out_channels = 1;
  int base_channels = 16;
  int depth = 3;
  float dropout_p = 0.3f;
  float bottleneck_dropout_p = 0.4f;
  float leaky_slope = kDefaultLeakySlope;
  float bn_momentum = 0.1f;
  float bn_epsilon = 1e-5f;
  /// Shift and scale each input sample to zero mean, unit variance before the
  /// first layer. Not differentiated: the input is always a data leaf.
  bool standardize_input = true;

  void validate() const;
  /// Channels of encoder level `level`; level == depth is the bottleneck.
  [[nodiscard]] int channels_at(int level) const { return base_channels << level; }
};

/// Encoder level i: two 3x3 conv+BN+LeakyReLU units, dropout, then a stride-2
/// 3x3 conv+BN+LeakyReLU down to the next level. The bottleneck is one more
/// pair of units with the heavier dropout. Decoder level i upsamples
/// bilinearly to the encoder level-i feature size, concatenates that skip
/// feature, and runs a pair of units plus dropout. A 1x1 conv and a sigmoid
/// produce the mask probability.
///
/// Convolution weights use He-normal initialization with the leaky slope;
/// biases and BN shifts start at zero, BN scales at one.
ModelParams build_model(const UNetConfig& config, RngStream& rng);

/// Per-sample (x - mean) / (std + 1e-5) over C*H*W, as a fresh leaf.
Tensor standardize_per_sample(const Tensor& x);

/// Output is [B, out_channels, H, W] with values in (0, 1). H and W must be
/// divisible by 2^depth. `rng` drives dropout in train mode.
Tensor unet_forward(const ModelParams& params, const UNetConfig& config, const Tensor& x, Mode mode,
                    RngStream& rng);

}  // namespace fedgin
