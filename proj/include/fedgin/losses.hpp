#pragma once

#include "fedgin/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace fedgin {

struct LossConfig {
  float focal_gamma = 2.0f;
  float focal_alpha = 0.25f;
  float dice_smooth = 1.0f;
  float focal_weight = 0.5f;
  float dice_weight = 0.5f;
  float threshold = 0.5f;

  void validate() const;
};

inline constexpr float kProbabilityClamp = 1e-7f;

/// Soft Dice loss 1 - (2*sum(p*t) + s) / (sum(p) + sum(t) + s), computed per
/// sample over all non-batch axes and averaged over the batch.
Tensor dice_loss(const Tensor& pred, const Tensor& target, float smooth);

/// Mean over all elements of -a_t * (1 - p_t)^gamma * log(p_t), with p clamped
/// to [1e-7, 1 - 1e-7] (zero gradient where the clamp is active).
Tensor focal_loss(const Tensor& pred, const Tensor& target, float gamma, float alpha);

Tensor combined_loss(const Tensor& pred, const Tensor& target, const LossConfig& config);
/// The weighting used by combined_loss, on plain numbers.
double combine_loss_values(double focal, double dice, const LossConfig& config);

/// Thresholded per-slice predictions for one volume, in any order.
struct VolumePrediction {
  struct Slice {
    int index = 0;
    std::int64_t height = 0;
    std::int64_t width = 0;
    std::vector<std::uint8_t> predicted;
    std::vector<std::uint8_t> truth;
  };
  std::string volume_id;
  std::vector<Slice> slices;
};

std::vector<std::uint8_t> threshold_mask(std::span<const float> probabilities, float threshold);

/// Hard Dice over the stacked volume: 2|P&G| / (|P| + |G|); 1.0 when both
/// are empty. Slice indices must form 0..n-1 without gaps or duplicates.
double dice_score_3d(const VolumePrediction& volume);

}  // namespace fedgin
