#include "fedgin/losses.hpp"

#include "fedgin/ops.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>

namespace fedgin {

void LossConfig::validate() const {
  if (std::abs(focal_weight + dice_weight - 1.0f) > 1e-6f) {
    throw std::invalid_argument("loss: focal_weight + dice_weight must equal 1");
  }
  if (!(threshold > 0.0f && threshold < 1.0f)) throw std::invalid_argument("loss: threshold must be in (0,1)");
  if (focal_gamma < 0.0f) throw std::invalid_argument("loss: focal_gamma must be >= 0");
  if (!(focal_alpha >= 0.0f && focal_alpha <= 1.0f)) throw std::invalid_argument("loss: focal_alpha must be in [0,1]");
  if (dice_smooth < 0.0f) throw std::invalid_argument("loss: dice_smooth must be >= 0");
}

namespace {

void check_pair(const Tensor& pred, const Tensor& target, const char* op) {
  if (pred.shape() != target.shape()) {
    throw ShapeError(std::string(op) + ": prediction shape " + shape_str(pred.shape()) +
                     " differs from target shape " + shape_str(target.shape()));
  }
  if (pred.ndim() < 1) throw ShapeError(std::string(op) + ": expected a batched tensor");
  for (float t : target.data()) {
    if (t != 0.0f && t != 1.0f) throw std::invalid_argument(std::string(op) + ": target must be binary");
  }
}

}  // namespace

Tensor dice_loss(const Tensor& pred, const Tensor& target, float smooth) {
  check_pair(pred, target, "dice_loss");
  const std::int64_t B = pred.dim(0);
  const std::int64_t n = B > 0 ? pred.numel() / B : 0;
  auto p = pred.data();
  auto t = target.data();
  std::vector<double> inter(static_cast<std::size_t>(B)), denom(static_cast<std::size_t>(B));
  double loss = 0.0;
  for (std::int64_t b = 0; b < B; ++b) {
    double i = 0.0, sp = 0.0, st = 0.0;
    for (std::int64_t k = b * n; k < (b + 1) * n; ++k) {
      i += static_cast<double>(p[static_cast<std::size_t>(k)]) * t[static_cast<std::size_t>(k)];
      sp += p[static_cast<std::size_t>(k)];
      st += t[static_cast<std::size_t>(k)];
    }
    inter[static_cast<std::size_t>(b)] = i;
    denom[static_cast<std::size_t>(b)] = sp + st + smooth;
    const double d = denom[static_cast<std::size_t>(b)];
    loss += d > 0.0 ? 1.0 - (2.0 * i + smooth) / d : 0.0;
  }
  loss /= static_cast<double>(std::max<std::int64_t>(B, 1));
  Tensor pr = pred, tr = target;
  return Tensor::make_result(
      "dice_loss", {}, {static_cast<float>(loss)}, {pred},
      [=, inter = std::move(inter), denom = std::move(denom)](detail::Node& self) {
        detail::Node* pn = pr.node();
        pn->ensure_grad();
        const double g = self.grad[0] / static_cast<double>(B);
        auto tv = tr.data();
        for (std::int64_t b = 0; b < B; ++b) {
          const double d = denom[static_cast<std::size_t>(b)];
          if (d <= 0.0) continue;
          const double num = 2.0 * inter[static_cast<std::size_t>(b)] + smooth;
          for (std::int64_t k = b * n; k < (b + 1) * n; ++k) {
            // d/dp of -(2I + s)/D = -(2t*D - num)/D^2
            const double dk = -(2.0 * tv[static_cast<std::size_t>(k)] * d - num) / (d * d);
            pn->grad[static_cast<std::size_t>(k)] += static_cast<float>(g * dk);
          }
        }
      });
}

Tensor focal_loss(const Tensor& pred, const Tensor& target, float gamma, float alpha) {
  check_pair(pred, target, "focal_loss");
  auto p = pred.data();
  auto t = target.data();
  const double lo = kProbabilityClamp, hi = 1.0 - kProbabilityClamp;
  const double a = alpha, gm = gamma;
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pc = std::clamp(static_cast<double>(p[i]), lo, hi);
    const bool pos = t[i] == 1.0f;
    const double pt = pos ? pc : 1.0 - pc;
    const double at = pos ? a : 1.0 - a;
    total += -at * std::pow(1.0 - pt, gm) * std::log(pt);
  }
  const double n = static_cast<double>(std::max<std::size_t>(p.size(), 1));
  Tensor pr = pred, tr = target;
  return Tensor::make_result("focal_loss", {}, {static_cast<float>(total / n)}, {pred},
                             [=](detail::Node& self) {
                               detail::Node* pn = pr.node();
                               pn->ensure_grad();
                               auto tv = tr.data();
                               const double g = self.grad[0] / n;
                               for (std::size_t i = 0; i < pn->data.size(); ++i) {
                                 const double raw = pn->data[i];
                                 if (raw < lo || raw > hi) continue;
                                 const bool pos = tv[i] == 1.0f;
                                 const double pt = pos ? raw : 1.0 - raw;
                                 const double at = pos ? a : 1.0 - a;
                                 // dL/dpt for L = -at (1-pt)^g log(pt)
                                 double dpt = -at * std::pow(1.0 - pt, gm) / pt;
                                 if (gm != 0.0) dpt += at * gm * std::pow(1.0 - pt, gm - 1.0) * std::log(pt);
                                 const double dp = pos ? dpt : -dpt;
                                 pn->grad[i] += static_cast<float>(g * dp);
                               }
                             });
}

double combine_loss_values(double focal, double dice, const LossConfig& config) {
  return static_cast<double>(config.focal_weight) * focal + static_cast<double>(config.dice_weight) * dice;
}

Tensor combined_loss(const Tensor& pred, const Tensor& target, const LossConfig& config) {
  Tensor f = focal_loss(pred, target, config.focal_gamma, config.focal_alpha);
  Tensor d = dice_loss(pred, target, config.dice_smooth);
  return add(scale(f, config.focal_weight), scale(d, config.dice_weight));
}

std::vector<std::uint8_t> threshold_mask(std::span<const float> probabilities, float threshold) {
  std::vector<std::uint8_t> out(probabilities.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = probabilities[i] >= threshold ? 1 : 0;
  return out;
}

double dice_score_3d(const VolumePrediction& volume) {
  if (volume.slices.empty()) throw std::invalid_argument("dice_score_3d: volume '" + volume.volume_id + "' has no slices");
  std::set<int> indices;
  const auto h = volume.slices.front().height, w = volume.slices.front().width;
  for (const auto& s : volume.slices) {
    if (!indices.insert(s.index).second) {
      throw std::invalid_argument("dice_score_3d: volume '" + volume.volume_id + "' has duplicate slice index " +
                                  std::to_string(s.index));
    }
    if (s.height != h || s.width != w) {
      throw std::invalid_argument("dice_score_3d: volume '" + volume.volume_id + "' mixes slice sizes");
    }
    const auto n = static_cast<std::size_t>(s.height * s.width);
    if (s.predicted.size() != n || s.truth.size() != n) {
      throw std::invalid_argument("dice_score_3d: slice " + std::to_string(s.index) + " of '" + volume.volume_id +
                                  "' has buffers inconsistent with its size");
    }
  }
  const int count = static_cast<int>(volume.slices.size());
  if (*indices.begin() != 0 || *indices.rbegin() != count - 1) {
    std::ostringstream gaps;
    int expect = 0;
    const int last = std::max(*indices.rbegin(), count - 1);
    for (int i = 0; i <= last; ++i) {
      if (!indices.contains(i)) gaps << (expect++ ? "," : "") << i;
    }
    throw std::invalid_argument("dice_score_3d: volume '" + volume.volume_id + "' is missing slice indices {" +
                                gaps.str() + "}");
  }
  std::int64_t inter = 0, sp = 0, sg = 0;
  for (const auto& s : volume.slices) {
    for (std::size_t i = 0; i < s.predicted.size(); ++i) {
      const bool p = s.predicted[i] != 0, g = s.truth[i] != 0;
      inter += p && g;
      sp += p;
      sg += g;
    }
  }
  if (sp + sg == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(sp + sg);
}

}  // namespace fedgin
