#pragma once

#include "fedgin/rng.hpp"
#include "fedgin/tensor.hpp"

namespace fedgin {

inline constexpr float kDefaultLeakySlope = 0.01f;

/// Cross-correlation over [B,Cin,H,W] with weight [Cout,Cin,kh,kw].
/// `bias` may be undefined. Output spatial size is
/// floor((H + 2*padding - kh) / stride) + 1.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int padding);

std::int64_t conv_output_size(std::int64_t in, std::int64_t kernel, int stride, int padding);

Tensor leaky_relu(const Tensor& input, float slope = kDefaultLeakySlope);

struct BatchNormOptions {
  Mode mode = Mode::Train;
  float momentum = 0.1f;
  float epsilon = 1e-5f;
};

/// Per-channel normalization of [B,C,H,W]. In train mode the batch's
/// population statistics are used and `running_mean` / `running_var` (shape
/// [C], updated in place, unbiased variance) are blended with `momentum`.
/// Eval mode reads the running statistics.
Tensor batch_norm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                    Tensor& running_var, const BatchNormOptions& options);

/// Bilinear resize of [B,C,H,W] to [B,C,out_h,out_w].
Tensor bilinear_upsample(const Tensor& input, std::int64_t out_h, std::int64_t out_w,
                         bool align_corners = true);

/// Inverted dropout; identity in eval mode or when p == 0.
Tensor dropout(const Tensor& input, float p, Mode mode, RngStream& rng);

/// Numerically stable logistic; outputs saturate inside the open interval (0, 1).
Tensor sigmoid(const Tensor& input);

/// Concatenate two [B,C?,H,W] tensors along the channel axis.
Tensor concat_channels(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);
/// Scalar sum, accumulated in double.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

}  // namespace fedgin
