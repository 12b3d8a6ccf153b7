#include "test_util.hpp"

#include "fedgin/losses.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>

using namespace fedgin;
using testutil::grad_check;

namespace {

Tensor binary(const Shape& s, RngStream& r, double p_one = 0.5) {
  std::vector<float> v(static_cast<std::size_t>(shape_numel(s)));
  for (auto& x : v) x = r.uniform() < p_one ? 1.0f : 0.0f;
  return Tensor::from_data(s, std::move(v));
}

VolumePrediction::Slice make_slice(int index, int h, int w, std::vector<std::uint8_t> p, std::vector<std::uint8_t> t) {
  return {index, h, w, std::move(p), std::move(t)};
}

// Independent oracle: count voxels over a dense [S][H][W] grid and apply the
// definition directly.
double voxel_oracle(const std::vector<std::vector<std::uint8_t>>& pred, const std::vector<std::vector<std::uint8_t>>& truth) {
  long inter = 0, np = 0, ng = 0;
  for (std::size_t s = 0; s < pred.size(); ++s)
    for (std::size_t i = 0; i < pred[s].size(); ++i) {
      np += pred[s][i];
      ng += truth[s][i];
      inter += pred[s][i] & truth[s][i];
    }
  if (np + ng == 0) return 1.0;
  return 2.0 * inter / static_cast<double>(np + ng);
}

}  // namespace

TEST_SUITE("losses") {

TEST_CASE("dice_loss examples") {
  Tensor t = Tensor::from_data({1, 1, 2, 2}, {1, 0, 1, 0});
  CHECK(dice_loss(t, t, 1.0f).item() < 1e-6);
  CHECK(dice_loss(t, t, 0.0f).item() == 0.0f);
  const int n = 16;
  std::vector<float> half(n, 0.0f);
  std::fill(half.begin(), half.begin() + n / 2, 1.0f);
  Tensor tgt = Tensor::from_data({1, 1, 4, 4}, half);
  Tensor ones = Tensor::full({1, 1, 4, 4}, 1.0f);
  CHECK(dice_loss(ones, tgt, 0.0f).item() == doctest::Approx(1.0 - 2.0 * (n / 2) / (n + n / 2.0)).epsilon(1e-6));
  CHECK(dice_loss(ones, tgt, 0.0f).item() == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
  Tensor z = Tensor::zeros({1, 1, 4, 4});
  CHECK(dice_loss(z, z, 1.0f).item() == 0.0f);
  CHECK_THROWS(dice_loss(ones, Tensor::full({1, 1, 4, 4}, 0.5f), 1.0f));
  CHECK_THROWS_AS(dice_loss(ones, Tensor::zeros({1, 1, 4, 5}), 1.0f), ShapeError);
  RngStream r(3);
  for (int i = 0; i < 20; ++i) {
    const float l = dice_loss(testutil::random_tensor({2, 1, 4, 4}, r, 0, 1, false), binary({2, 1, 4, 4}, r), 1.0f).item();
    CHECK((l >= 0.0f && l <= 1.0f));
  }
}

TEST_CASE("focal_loss examples") {
  Tensor one = Tensor::full({1, 1, 1, 1}, 1.0f);
  CHECK(focal_loss(Tensor::full({1, 1, 1, 1}, 0.5f), one, 2.0f, 0.25f).item() ==
        doctest::Approx(0.25 * 0.25 * std::log(2.0)).epsilon(1e-6));
  CHECK(focal_loss(Tensor::full({1, 1, 1, 1}, 1.0f - kProbabilityClamp), one, 2.0f, 0.25f).item() < 1e-5);
  CHECK(focal_loss(Tensor::full({1, 1, 1, 1}, kProbabilityClamp), Tensor::zeros({1, 1, 1, 1}), 2.0f, 0.25f).item() < 1e-5);
  RngStream r(8);
  Tensor p = testutil::random_tensor({1, 1, 4, 4}, r, 0.05, 0.95, false);
  Tensor t = binary({1, 1, 4, 4}, r);
  double bce = 0;
  for (int i = 0; i < 16; ++i) {
    const double pv = p.data()[i];
    bce += t.data()[i] == 1.0f ? -std::log(pv) : -std::log(1 - pv);
  }
  bce /= 16;
  CHECK(focal_loss(p, t, 0.0f, 0.5f).item() == doctest::Approx(0.5 * bce).epsilon(1e-6));
  CHECK(focal_loss(p, t, 2.0f, 0.25f).item() >= 0.0f);
}

TEST_CASE("combined_loss examples") {
  LossConfig c;
  CHECK(combine_loss_values(0.2, 0.4, c) == doctest::Approx(0.3));
  Tensor t = Tensor::from_data({1, 1, 2, 2}, {1, 0, 0, 1});
  Tensor perfect = Tensor::from_data({1, 1, 2, 2}, {1.0f - kProbabilityClamp, kProbabilityClamp, kProbabilityClamp,
                                                    1.0f - kProbabilityClamp});
  CHECK(combined_loss(perfect, t, c).item() < 1e-5);
  Tensor half = Tensor::full({1, 1, 1, 1}, 0.5f);
  Tensor y = Tensor::full({1, 1, 1, 1}, 1.0f);
  const double f = 0.25 * 0.25 * std::log(2.0);
  const double d = 1.0 - (2.0 * 0.5 + 1.0) / (0.5 + 1.0 + 1.0);
  CHECK(combined_loss(half, y, c).item() == doctest::Approx(0.5 * f + 0.5 * d).epsilon(1e-6));
  LossConfig bad;
  bad.focal_weight = 0.7f;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("loss gradients on 4x4 toys") {
  RngStream r(30);
  LossConfig c;
  for (int trial = 0; trial < 5; ++trial) {
    Tensor t = binary({2, 1, 4, 4}, r);
    auto g1 = grad_check([&](const auto& in) { return dice_loss(in[0], t, 1.0f); },
                         {testutil::random_tensor({2, 1, 4, 4}, r, 0.05, 0.95)});
    auto g2 = grad_check([&](const auto& in) { return focal_loss(in[0], t, 2.0f, 0.25f); },
                         {testutil::random_tensor({2, 1, 4, 4}, r, 0.05, 0.95)});
    auto g3 = grad_check([&](const auto& in) { return combined_loss(in[0], t, c); },
                         {testutil::random_tensor({2, 1, 4, 4}, r, 0.05, 0.95)});
    CHECK(g1.max_error < 1e-3);
    CHECK(g2.max_error < 1e-3);
    CHECK(g3.max_error < 1e-3);
  }
}

TEST_CASE("dice_score_3d examples") {
  SUBCASE("perfect volume") {
    VolumePrediction v{"v", {}};
    for (int s = 0; s < 3; ++s) v.slices.push_back(make_slice(s, 2, 2, {1, 0, 1, 1}, {1, 0, 1, 1}));
    CHECK(dice_score_3d(v) == 1.0);
  }
  SUBCASE("replicated slices keep the 2D value") {
    VolumePrediction one{"v", {make_slice(0, 2, 2, {1, 1, 0, 0}, {1, 0, 1, 0})}};
    const double d = dice_score_3d(one);
    CHECK(d == doctest::Approx(0.5));
    VolumePrediction k{"v", {}};
    for (int s = 0; s < 5; ++s) k.slices.push_back(make_slice(s, 2, 2, {1, 1, 0, 0}, {1, 0, 1, 0}));
    CHECK(dice_score_3d(k) == doctest::Approx(d));
  }
  SUBCASE("stacking differs from averaging 2D scores") {
    std::vector<std::uint8_t> p1(40, 0), t1(40, 0), p2(20, 0), t2(20, 0);
    for (int i = 0; i < 20; ++i) p1[i] = 1;
    for (int i = 10; i < 30; ++i) t1[i] = 1;
    for (int i = 0; i < 10; ++i) p2[i] = 1;
    for (int i = 10; i < 20; ++i) t2[i] = 1;
    VolumePrediction v{"v", {make_slice(1, 4, 10, p1, t1), make_slice(0, 4, 5, p2, t2)}};
    // different slice sizes are refused; repack into one grid
    CHECK_THROWS(dice_score_3d(v));
    p2.resize(40, 0);
    t2.resize(40, 0);
    VolumePrediction w{"v", {make_slice(0, 4, 10, p1, t1), make_slice(1, 4, 10, p2, t2)}};
    const double d = dice_score_3d(w);
    CHECK(d == doctest::Approx(1.0 / 3.0));
    CHECK(d == voxel_oracle({p1, p2}, {t1, t2}));
    CHECK(std::abs(d - 0.25) > 0.05);
  }
  SUBCASE("double empty counts as 1") {
    VolumePrediction v{"v", {make_slice(0, 1, 2, {0, 0}, {0, 0})}};
    CHECK(dice_score_3d(v) == 1.0);
  }
  SUBCASE("index errors") {
    VolumePrediction dup{"v", {make_slice(0, 1, 1, {1}, {1}), make_slice(0, 1, 1, {1}, {1})}};
    CHECK_THROWS(dice_score_3d(dup));
    VolumePrediction gap{"v", {make_slice(0, 1, 1, {1}, {1}), make_slice(2, 1, 1, {1}, {1})}};
    CHECK_THROWS_WITH(dice_score_3d(gap), doctest::Contains("1"));
  }
  SUBCASE("permutation and relabel invariance") {
    RngStream r(4);
    VolumePrediction v{"a", {}};
    for (int s = 0; s < 6; ++s) {
      std::vector<std::uint8_t> p(9), t(9);
      for (int i = 0; i < 9; ++i) {
        p[i] = r.uniform() < 0.4;
        t[i] = r.uniform() < 0.4;
      }
      v.slices.push_back(make_slice(s, 3, 3, p, t));
    }
    const double d = dice_score_3d(v);
    VolumePrediction w = v;
    std::reverse(w.slices.begin(), w.slices.end());
    std::swap(w.slices[1], w.slices[4]);
    w.volume_id = "renamed";
    CHECK(dice_score_3d(w) == d);
  }
}

TEST_CASE("threshold_mask uses >= threshold") {
  const std::vector<float> p{0.49f, 0.5f, 0.51f, 0.0f};
  CHECK(threshold_mask(p, 0.5f) == std::vector<std::uint8_t>{0, 1, 1, 0});
}

}  // TEST_SUITE
