#include "test_util.hpp"

#include "fedgin/optim.hpp"
#include "fedgin/params.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>

using namespace fedgin;
using testutil::grad_check;
using testutil::random_tensor;

namespace {

Tensor seq(const Shape& s, float start = 0.0f) {
  std::vector<float> v(static_cast<std::size_t>(shape_numel(s)));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = start + static_cast<float>(i);
  return Tensor::from_data(s, v);
}

std::vector<float> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_SUITE("tensor") {

TEST_CASE("rng streams are deterministic and children independent") {
  RngStream a(7), b(7);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  RngStream p(7);
  const auto c1 = p.child("x"), c2 = p.child("x"), c3 = p.child("y");
  CHECK(c1 == c2);
  CHECK(c1.key() != c3.key());
  CHECK(p.counter() == 0);
  RngStream u(3);
  for (int i = 0; i < 1000; ++i) {
    const double x = u.uniform();
    CHECK((x >= 0.0 && x < 1.0));
    CHECK(u.uniform_index(7) < 7u);
  }
}

TEST_CASE("conv2d examples") {
  SUBCASE("zero input gives zero output") {
    RngStream r(1);
    Tensor w = random_tensor({2, 1, 3, 3}, r);
    Tensor out = conv2d(Tensor::zeros({1, 1, 3, 3}), w, Tensor(), 1, 1);
    for (float v : out.data()) CHECK(v == 0.0f);
  }
  SUBCASE("1x1 identity kernel") {
    Tensor x = seq({1, 1, 3, 3});
    Tensor out = conv2d(x, Tensor::full({1, 1, 1, 1}, 1.0f), Tensor(), 1, 0);
    CHECK(bitwise_equal(out, x));
  }
  SUBCASE("sliding-window sum against brute force") {
    Tensor x = seq({1, 1, 4, 4});
    Tensor out = conv2d(x, Tensor::full({1, 1, 3, 3}, 1.0f), Tensor(), 1, 0);
    REQUIRE(out.shape() == Shape{1, 1, 2, 2});
    // independent oracle: direct window sums
    for (int oy = 0; oy < 2; ++oy)
      for (int ox = 0; ox < 2; ++ox) {
        float s = 0;
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) s += static_cast<float>((oy + ky) * 4 + ox + kx);
        CHECK(out.at({0, 0, oy, ox}) == s);
      }
    CHECK(values(out) == std::vector<float>{45, 54, 81, 90});
  }
  SUBCASE("random conv against a naive loop") {
    RngStream r(2);
    for (int stride : {1, 2})
      for (int pad : {0, 1, 2}) {
        Tensor x = random_tensor({2, 3, 7, 6}, r), w = random_tensor({4, 3, 3, 3}, r), b = random_tensor({4}, r);
        Tensor out = conv2d(x, w, b, stride, pad);
        const auto oh = conv_output_size(7, 3, stride, pad), ow = conv_output_size(6, 3, stride, pad);
        REQUIRE(out.shape() == Shape{2, 4, oh, ow});
        for (int n = 0; n < 2; ++n)
          for (int o = 0; o < 4; ++o)
            for (int y = 0; y < oh; ++y)
              for (int xx = 0; xx < ow; ++xx) {
                double s = b.data()[o];
                for (int c = 0; c < 3; ++c)
                  for (int ky = 0; ky < 3; ++ky)
                    for (int kx = 0; kx < 3; ++kx) {
                      const int iy = y * stride - pad + ky, ix = xx * stride - pad + kx;
                      if (iy < 0 || iy >= 7 || ix < 0 || ix >= 6) continue;
                      s += static_cast<double>(x.at({n, c, iy, ix})) * w.at({o, c, ky, kx});
                    }
                CHECK(out.at({n, o, y, xx}) == doctest::Approx(s).epsilon(1e-5));
              }
      }
  }
  SUBCASE("shape formula sweep") {
    for (int in = 1; in <= 9; ++in)
      for (int k : {1, 3, 5})
        for (int s : {1, 2, 3})
          for (int p = 0; p <= 2; ++p) {
            const auto expect = (in + 2 * p - k) / s + 1;
            if (in + 2 * p < k) {
              CHECK_THROWS(conv2d(Tensor::zeros({1, 1, in, in}), Tensor::zeros({1, 1, k, k}), Tensor(), s, p));
              continue;
            }
            Tensor out = conv2d(Tensor::zeros({1, 1, in, in}), Tensor::zeros({1, 1, k, k}), Tensor(), s, p);
            CHECK(out.dim(2) == expect);
            CHECK(out.dim(3) == expect);
          }
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 1, 3, 3}), Tensor(), 1, 0), ShapeError);
    CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 1, 4, 4}), Tensor::zeros({1, 1, 2, 2}), Tensor(), 1, 0), ShapeError);
    CHECK_THROWS(conv2d(Tensor::zeros({1, 1, 4, 4}), Tensor::zeros({1, 1, 3, 3}), Tensor(), 0, 0));
  }
}

TEST_CASE("leaky_relu examples") {
  Tensor y = leaky_relu(Tensor::from_data({3}, {-1, 0, 2}), 0.01f);
  CHECK(y.data()[0] == doctest::Approx(-0.01));
  CHECK(y.data()[1] == 0.0f);
  CHECK(y.data()[2] == 2.0f);
  CHECK(values(leaky_relu(Tensor::from_data({2}, {-3, 4}), 0.0f)) == std::vector<float>{0, 4});
  Tensor x = Tensor::from_data({1}, {-2}, true);
  Tensor s = sum(leaky_relu(x, 0.1f));
  s.backward();
  CHECK(x.grad()[0] == doctest::Approx(0.1));
}

TEST_CASE("batch_norm2d examples") {
  SUBCASE("hand computation with population variance") {
    Tensor x = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor rm = Tensor::zeros({1}), rv = Tensor::full({1}, 1.0f);
    Tensor y = batch_norm2d(x, Tensor::full({1}, 2.0f), Tensor::full({1}, 1.0f), rm, rv, {Mode::Train, 0.1f, 0.0f});
    const double sd = std::sqrt(1.25);
    const double expect[] = {(1 - 2.5) / sd * 2 + 1, (2 - 2.5) / sd * 2 + 1, (3 - 2.5) / sd * 2 + 1,
                             (4 - 2.5) / sd * 2 + 1};
    for (int i = 0; i < 4; ++i) CHECK(y.data()[i] == doctest::Approx(expect[i]).epsilon(1e-6));
    CHECK(y.data()[0] == doctest::Approx(-1.6833).epsilon(1e-4));
    CHECK(y.data()[3] == doctest::Approx(3.6833).epsilon(1e-4));
    // running stats: momentum blend, unbiased variance 5/3
    CHECK(rm.data()[0] == doctest::Approx(0.25));
    CHECK(rv.data()[0] == doctest::Approx(0.9 + 0.1 * (5.0 / 3.0)));
  }
  SUBCASE("already normalized input passes through") {
    Tensor x = Tensor::from_data({1, 1, 2, 2}, {-1, -1, 1, 1});
    Tensor rm = Tensor::zeros({1}), rv = Tensor::full({1}, 1.0f);
    Tensor y = batch_norm2d(x, Tensor::full({1}, 1.0f), Tensor::zeros({1}), rm, rv, {});
    for (int i = 0; i < 4; ++i) CHECK(std::abs(y.data()[i] - x.data()[i]) < 1e-4);
  }
  SUBCASE("train mode output per channel is standardized") {
    RngStream r(5);
    Tensor x = random_tensor({3, 2, 4, 5}, r, -3, 7, false);
    Tensor rm = Tensor::zeros({2}), rv = Tensor::full({2}, 1.0f);
    Tensor y = batch_norm2d(x, Tensor::full({2}, 1.0f), Tensor::zeros({2}), rm, rv, {});
    for (int c = 0; c < 2; ++c) {
      double s = 0, ss = 0;
      int n = 0;
      for (int b = 0; b < 3; ++b)
        for (int i = 0; i < 20; ++i) {
          const double v = y.data()[static_cast<std::size_t>((b * 2 + c) * 20 + i)];
          s += v;
          ss += v * v;
          ++n;
        }
      CHECK(std::abs(s / n) < 1e-4);
      CHECK(std::abs(ss / n - (s / n) * (s / n) - 1.0) < 1e-3);
    }
  }
  SUBCASE("eval mode uses running statistics") {
    Tensor x = Tensor::from_data({1, 1, 1, 2}, {3, 5});
    Tensor rm = Tensor::full({1}, 1.0f), rv = Tensor::full({1}, 4.0f);
    Tensor y = batch_norm2d(x, Tensor::full({1}, 1.0f), Tensor::zeros({1}), rm, rv, {Mode::Eval, 0.1f, 0.0f});
    CHECK(y.data()[0] == doctest::Approx(1.0));
    CHECK(y.data()[1] == doctest::Approx(2.0));
    CHECK(rm.data()[0] == 1.0f);
  }
  SUBCASE("train mode needs two values per channel") {
    Tensor rm = Tensor::zeros({1}), rv = Tensor::full({1}, 1.0f);
    CHECK_THROWS(batch_norm2d(Tensor::zeros({1, 1, 1, 1}), Tensor::full({1}, 1.0f), Tensor::zeros({1}), rm, rv, {}));
  }
}

TEST_CASE("bilinear_upsample examples") {
  Tensor c = bilinear_upsample(Tensor::full({1, 1, 2, 2}, 5.0f), 4, 4);
  for (float v : c.data()) CHECK(v == doctest::Approx(5.0));
  RngStream r(3);
  Tensor x = random_tensor({2, 3, 3, 5}, r, -1, 1, false);
  CHECK(bitwise_equal(bilinear_upsample(x, 3, 5), x));
  Tensor g = bilinear_upsample(Tensor::from_data({1, 1, 2, 2}, {0, 1, 2, 3}), 4, 4);
  // oracle: align_corners maps output i to input i*(in-1)/(out-1)
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      const double sy = i / 3.0, sx = j / 3.0;
      const double v = (1 - sy) * (1 - sx) * 0 + (1 - sy) * sx * 1 + sy * (1 - sx) * 2 + sy * sx * 3;
      CHECK(g.at({0, 0, i, j}) == doctest::Approx(v).epsilon(1e-6));
    }
  CHECK(g.at({0, 0, 0, 0}) == 0.0f);
  CHECK(g.at({0, 0, 0, 3}) == 1.0f);
  CHECK(g.at({0, 0, 3, 0}) == 2.0f);
  CHECK(g.at({0, 0, 3, 3}) == 3.0f);
}

TEST_CASE("dropout examples") {
  RngStream r(11);
  Tensor x = random_tensor({4, 8}, r, -1, 1, false);
  CHECK(bitwise_equal(dropout(x, 0.0f, Mode::Train, r), x));
  CHECK(bitwise_equal(dropout(x, 0.7f, Mode::Eval, r), x));
  Tensor ones = Tensor::full({100000}, 1.0f);
  Tensor y = dropout(ones, 0.5f, Mode::Train, r);
  double s = 0;
  for (float v : y.data()) {
    CHECK((v == 0.0f || v == 2.0f));
    s += v;
  }
  CHECK(s / 1e5 >= 0.98);
  CHECK(s / 1e5 <= 1.02);
  RngStream a(4), b(4);
  CHECK(bitwise_equal(dropout(ones, 0.3f, Mode::Train, a), dropout(ones, 0.3f, Mode::Train, b)));
}

TEST_CASE("sigmoid examples") {
  Tensor y = sigmoid(Tensor::from_data({3}, {0.0f, -50.0f, 1.0f}));
  CHECK(y.data()[0] == 0.5f);
  CHECK(y.data()[1] < 1e-20f);
  CHECK(y.data()[1] > 0.0f);
  CHECK(y.data()[2] == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-7));
  Tensor big = sigmoid(Tensor::from_data({2}, {80.0f, -200.0f}));
  CHECK(big.data()[0] < 1.0f);
  CHECK(big.data()[1] > 0.0f);
}

TEST_CASE("no silent NaN") {
  const float nan = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(Tensor::from_data({1}, {nan}), NonFiniteError);
  CHECK_THROWS_AS(scale(Tensor::full({1}, 3e38f), 10.0f), NonFiniteError);
  CHECK_THROWS_AS(add(Tensor::full({1}, 3e38f), Tensor::full({1}, 3e38f)), NonFiniteError);
}

TEST_CASE("per-op gradient checks") {
  RngStream r(21);
  auto check = [](const char* name, const testutil::GradCheck& g) {
    INFO(name << " max error " << g.max_error << " abs " << g.max_abs);
    CHECK(g.checked > 0);
    CHECK(g.max_error < 1e-3);
  };
  check("conv2d s1 p1", grad_check([](const auto& in) { return conv2d(in[0], in[1], in[2], 1, 1); },
                                  {random_tensor({2, 2, 4, 4}, r), random_tensor({2, 2, 3, 3}, r), random_tensor({2}, r)}));
  check("conv2d s2 p1", grad_check([](const auto& in) { return conv2d(in[0], in[1], in[2], 2, 1); },
                                  {random_tensor({1, 2, 5, 5}, r), random_tensor({3, 2, 3, 3}, r), random_tensor({3}, r)}));
  check("conv2d 1x1", grad_check([](const auto& in) { return conv2d(in[0], in[1], in[2], 1, 0); },
                                {random_tensor({2, 3, 3, 3}, r), random_tensor({2, 3, 1, 1}, r), random_tensor({2}, r)}));
  check("leaky_relu", grad_check([](const auto& in) { return leaky_relu(in[0], 0.2f); },
                                {testutil::away_from_zero({4, 16}, r)}));
  check("batch_norm2d train", grad_check(
                                  [](const auto& in) {
                                    Tensor rm = Tensor::zeros({2}), rv = Tensor::full({2}, 1.0f);
                                    return batch_norm2d(in[0], in[1], in[2], rm, rv, {});
                                  },
                                  {random_tensor({2, 2, 3, 3}, r), random_tensor({2}, r, 0.5, 1.5), random_tensor({2}, r)}));
  check("batch_norm2d eval", grad_check(
                                 [](const auto& in) {
                                   Tensor rm = Tensor::full({2}, 0.1f), rv = Tensor::full({2}, 0.7f);
                                   return batch_norm2d(in[0], in[1], in[2], rm, rv, {Mode::Eval});
                                 },
                                 {random_tensor({2, 2, 3, 3}, r), random_tensor({2}, r), random_tensor({2}, r)}));
  check("bilinear_upsample", grad_check([](const auto& in) { return bilinear_upsample(in[0], 5, 7); },
                                       {random_tensor({1, 2, 3, 4}, r)}));
  const RngStream drop_rng(8);
  check("dropout", grad_check(
                       [&](const auto& in) {
                         RngStream copy = drop_rng;
                         return dropout(in[0], 0.4f, Mode::Train, copy);
                       },
                       {random_tensor({4, 16}, r)}));
  check("sigmoid", grad_check([](const auto& in) { return sigmoid(in[0]); }, {random_tensor({64}, r, -4, 4)}));
  check("concat_channels", grad_check([](const auto& in) { return concat_channels(in[0], in[1]); },
                                     {random_tensor({2, 1, 3, 3}, r), random_tensor({2, 2, 3, 3}, r)}));
  check("add", grad_check([](const auto& in) { return add(in[0], in[1]); }, {random_tensor({8}, r), random_tensor({8}, r)}));
  check("mul", grad_check([](const auto& in) { return mul(in[0], in[1]); }, {random_tensor({8}, r), random_tensor({8}, r)}));
  check("scale", grad_check([](const auto& in) { return scale(in[0], -2.5f); }, {random_tensor({8}, r)}));
  check("sum", grad_check([](const auto& in) { return sum(in[0]); }, {random_tensor({3, 5}, r)}));
  check("mean", grad_check([](const auto& in) { return mean(in[0]); }, {random_tensor({3, 5}, r)}));
}

TEST_CASE("gradients accumulate across shared inputs") {
  Tensor x = Tensor::from_data({2}, {1, 2}, true);
  Tensor y = sum(add(mul(x, x), x));
  y.backward();
  CHECK(x.grad()[0] == doctest::Approx(3));
  CHECK(x.grad()[1] == doctest::Approx(5));
}

TEST_CASE("NoGradGuard stops graph recording") {
  Tensor x = Tensor::from_data({2}, {1, 2}, true);
  {
    NoGradGuard ng;
    CHECK_FALSE(grad_enabled());
    Tensor y = scale(x, 2.0f);
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(grad_enabled());
}

TEST_CASE("adamw examples") {
  auto one = [](float theta, float g, double lr, double wd) {
    ModelParams p;
    Tensor t = Tensor::from_data({1}, {theta}, true);
    t.mutable_grad()[0] = g;
    p.add("w", t);
    OptimizerState s;
    s.config.learning_rate = lr;
    s.config.weight_decay = wd;
    adamw_step(p, s);
    return p.at("w").data()[0];
  };
  CHECK(one(1.0f, 0.0f, 1e-3, 0.0) == 1.0f);
  CHECK(std::abs(one(0.0f, 1.0f, 1e-3, 0.0) - (-1e-3)) < 1e-6);
  // 1 - 1e-7 rounded to the nearest float
  CHECK(one(1.0f, 0.0f, 1e-3, 1e-4) == static_cast<float>(1.0 - 1e-7));
  CHECK(one(1.0f, 0.0f, 0.1, 0.01) == doctest::Approx(0.999).epsilon(1e-6));
  // running statistics are not optimized
  ModelParams p;
  p.add("bn.running_mean", Tensor::full({1}, 2.0f));
  OptimizerState s;
  adamw_step(p, s);
  CHECK(p.at("bn.running_mean").data()[0] == 2.0f);
  // non-finite gradient is refused before anything changes
  ModelParams q;
  Tensor t = Tensor::from_data({2}, {1, 1}, true);
  t.mutable_grad()[1] = std::numeric_limits<float>::infinity();
  q.add("w", t);
  OptimizerState s2;
  CHECK_THROWS_AS(adamw_step(q, s2), NonFiniteGradientError);
  CHECK(q.at("w").data()[0] == 1.0f);
}

TEST_CASE("kaiming_init statistics") {
  RngStream r(17);
  Tensor w = kaiming_init({100000}, 100, 0.0f, r);
  double s = 0, ss = 0;
  for (float v : w.data()) {
    s += v;
    ss += static_cast<double>(v) * v;
  }
  const double n = 1e5, mean = s / n, var = ss / n - mean * mean;
  CHECK(var >= 0.0185);
  CHECK(var <= 0.0215);
  CHECK(std::abs(mean) < 3.0 * std::sqrt(0.02) / std::sqrt(n));
  RngStream a(1), b(1);
  CHECK(bitwise_equal(kaiming_init({4, 4}, 16, 0.01f, a), kaiming_init({4, 4}, 16, 0.01f, b)));
}

TEST_CASE("plateau scheduler examples") {
  PlateauConfig c;
  c.patience = 2;
  PlateauScheduler s(c, 5e-4);
  s.step(0.5);
  s.step(0.5);
  CHECK(s.learning_rate() == 5e-4);
  s.step(0.5);
  CHECK(s.learning_rate() == doctest::Approx(2.5e-4));
  PlateauScheduler up(PlateauConfig{}, 5e-4);
  for (int i = 0; i < 20; ++i) up.step(0.01 * i);
  CHECK(up.learning_rate() == 5e-4);
  PlateauConfig floor;
  floor.patience = 1;
  PlateauScheduler f(floor, floor.min_lr);
  for (int i = 0; i < 10; ++i) f.step(0.1);
  CHECK(f.learning_rate() == floor.min_lr);
  PlateauConfig off;
  off.enabled = false;
  PlateauScheduler o(off, 1e-3);
  for (int i = 0; i < 10; ++i) o.step(0.0);
  CHECK(o.learning_rate() == 1e-3);
}

TEST_CASE("model params bookkeeping") {
  ModelParams p;
  p.add("a", Tensor::zeros({2, 3}, true));
  p.add("b.running_mean", Tensor::zeros({3}));
  CHECK_THROWS(p.add("a", Tensor::zeros({1})));
  CHECK(p.element_count() == 9);
  CHECK(p.trainable_element_count() == 6);
  ModelParams q = p.clone();
  q.at("a").mutable_data()[0] = 1.0f;
  CHECK(p.at("a").data()[0] == 0.0f);
  CHECK(p.congruent_with(q));
  CHECK_FALSE(bitwise_equal(p, q));
  p.assign_values(q);
  CHECK(bitwise_equal(p, q));
}

}  // TEST_SUITE
