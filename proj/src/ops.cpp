#include "fedgin/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>

namespace fedgin {

namespace {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* operand) {
  if (!t.defined()) throw ShapeError(std::string(op) + ": operand '" + operand + "' is undefined");
  if (t.ndim() != rank) {
    throw ShapeError(std::string(op) + ": operand '" + operand + "' expected rank " + std::to_string(rank) +
                     ", got shape " + shape_str(t.shape()));
  }
}

struct ConvGeometry {
  std::int64_t batch, cin, h, w, cout, kh, kw, ho, wo;
  int stride, pad;
  [[nodiscard]] std::int64_t ck() const { return cin * kh * kw; }
  [[nodiscard]] std::int64_t hw_out() const { return ho * wo; }
};

void im2col(const float* x, const ConvGeometry& g, float* col) {
  const std::int64_t hw = g.hw_out();
  for (std::int64_t c = 0; c < g.cin; ++c) {
    const float* xc = x + c * g.h * g.w;
    for (std::int64_t i = 0; i < g.kh; ++i) {
      for (std::int64_t j = 0; j < g.kw; ++j) {
        float* row = col + ((c * g.kh + i) * g.kw + j) * hw;
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + i;
          float* dst = row + oy * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.wo, 0.0f);
            continue;
          }
          const float* src = xc + iy * g.w;
          for (std::int64_t ox = 0; ox < g.wo; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + j;
            dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : 0.0f;
          }
        }
      }
    }
  }
}

void col2im_add(const float* col, const ConvGeometry& g, float* dx) {
  const std::int64_t hw = g.hw_out();
  for (std::int64_t c = 0; c < g.cin; ++c) {
    float* xc = dx + c * g.h * g.w;
    for (std::int64_t i = 0; i < g.kh; ++i) {
      for (std::int64_t j = 0; j < g.kw; ++j) {
        const float* row = col + ((c * g.kh + i) * g.kw + j) * hw;
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + i;
          if (iy < 0 || iy >= g.h) continue;
          float* dst = xc + iy * g.w;
          const float* src = row + oy * g.wo;
          for (std::int64_t ox = 0; ox < g.wo; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + j;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

bool is_pointwise(const ConvGeometry& g) { return g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0; }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": operand shapes differ, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

}  // namespace

std::int64_t conv_output_size(std::int64_t in, std::int64_t kernel, int stride, int padding) {
  const std::int64_t span = in + 2 * padding - kernel;
  if (span < 0) return 0;
  return span / stride + 1;
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int padding) {
  require_rank(input, 4, "conv2d", "input");
  require_rank(weight, 4, "conv2d", "weight");
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (padding < 0) throw std::invalid_argument("conv2d: padding must be >= 0");
  ConvGeometry g{};
  g.batch = input.dim(0);
  g.cin = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.cout = weight.dim(0);
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  g.stride = stride;
  g.pad = padding;
  if (weight.dim(1) != g.cin) {
    throw ShapeError("conv2d: operand 'weight' expected shape [" + std::to_string(g.cout) + "," +
                     std::to_string(g.cin) + ",kh,kw] to match input channels, got " + shape_str(weight.shape()));
  }
  if (g.kh % 2 == 0 || g.kw % 2 == 0) {
    throw ShapeError("conv2d: operand 'weight' kernel must be odd-sized, got " + shape_str(weight.shape()));
  }
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != g.cout)) {
    throw ShapeError("conv2d: operand 'bias' expected shape [" + std::to_string(g.cout) + "], got " +
                     shape_str(bias.shape()));
  }
  g.ho = conv_output_size(g.h, g.kh, stride, padding);
  g.wo = conv_output_size(g.w, g.kw, stride, padding);
  if (g.ho < 1 || g.wo < 1) {
    throw ShapeError("conv2d: operand 'input' of shape " + shape_str(input.shape()) +
                     " too small for kernel " + shape_str(weight.shape()) + " with padding " +
                     std::to_string(padding));
  }

  const std::int64_t ck = g.ck();
  const std::int64_t hw = g.hw_out();
  const bool pointwise = is_pointwise(g);
  const bool keep_cols = grad_enabled() && weight.requires_grad() && !pointwise;

  std::vector<float> out(static_cast<std::size_t>(g.batch * g.cout * hw));
  std::vector<float> cols;
  if (keep_cols) cols.resize(static_cast<std::size_t>(g.batch * ck * hw));
  std::vector<float> scratch;
  if (!keep_cols && !pointwise) scratch.resize(static_cast<std::size_t>(ck * hw));

  const float* x = input.data().data();
  CMapM wmat(weight.data().data(), g.cout, ck);
  for (std::int64_t b = 0; b < g.batch; ++b) {
    const float* xb = x + b * g.cin * g.h * g.w;
    const float* colb;
    if (pointwise) {
      colb = xb;
    } else {
      float* dst = keep_cols ? cols.data() + b * ck * hw : scratch.data();
      im2col(xb, g, dst);
      colb = dst;
    }
    MapM ob(out.data() + b * g.cout * hw, g.cout, hw);
    ob.noalias() = wmat * CMapM(colb, ck, hw);
    if (bias.defined()) {
      auto bd = bias.data();
      for (std::int64_t o = 0; o < g.cout; ++o) ob.row(o).array() += bd[static_cast<std::size_t>(o)];
    }
  }

  Tensor in_ref = input, w_ref = weight, b_ref = bias;
  std::vector<Tensor> inputs{input, weight};
  if (bias.defined()) inputs.push_back(bias);
  return Tensor::make_result(
      "conv2d", {g.batch, g.cout, g.ho, g.wo}, std::move(out), std::move(inputs),
      [g, cols = std::move(cols), pointwise, in_ref, w_ref, b_ref](detail::Node& self) mutable {
        const std::int64_t ck = g.ck();
        const std::int64_t hw = g.hw_out();
        const float* dy = self.grad.data();
        detail::Node* xin = in_ref.node();
        detail::Node* wn = w_ref.node();
        if (b_ref.defined() && b_ref.requires_grad()) {
          detail::Node* bn = b_ref.node();
          bn->ensure_grad();
          for (std::int64_t o = 0; o < g.cout; ++o) {
            double s = 0.0;
            for (std::int64_t b = 0; b < g.batch; ++b) {
              const float* row = dy + (b * g.cout + o) * hw;
              for (std::int64_t k = 0; k < hw; ++k) s += row[k];
            }
            bn->grad[static_cast<std::size_t>(o)] += static_cast<float>(s);
          }
        }
        std::vector<float> scratch;
        if (wn->requires_grad) {
          wn->ensure_grad();
          MapM dw(wn->grad.data(), g.cout, ck);
          for (std::int64_t b = 0; b < g.batch; ++b) {
            const float* colb;
            if (pointwise) {
              colb = xin->data.data() + b * g.cin * g.h * g.w;
            } else if (!cols.empty()) {
              colb = cols.data() + b * ck * hw;
            } else {
              scratch.resize(static_cast<std::size_t>(ck * hw));
              im2col(xin->data.data() + b * g.cin * g.h * g.w, g, scratch.data());
              colb = scratch.data();
            }
            dw.noalias() += CMapM(dy + b * g.cout * hw, g.cout, hw) * CMapM(colb, ck, hw).transpose();
          }
        }
        if (xin->requires_grad) {
          xin->ensure_grad();
          CMapM wmat(wn->data.data(), g.cout, ck);
          std::vector<float> dcol(static_cast<std::size_t>(ck * hw));
          for (std::int64_t b = 0; b < g.batch; ++b) {
            float* dxb = xin->grad.data() + b * g.cin * g.h * g.w;
            if (pointwise) {
              MapM dxm(dxb, ck, hw);
              dxm.noalias() += wmat.transpose() * CMapM(dy + b * g.cout * hw, g.cout, hw);
            } else {
              MapM dc(dcol.data(), ck, hw);
              dc.noalias() = wmat.transpose() * CMapM(dy + b * g.cout * hw, g.cout, hw);
              col2im_add(dcol.data(), g, dxb);
            }
          }
        }
        cols.clear();
        cols.shrink_to_fit();
      });
}

Tensor leaky_relu(const Tensor& input, float slope) {
  if (!(slope >= 0.0f && slope < 1.0f)) throw std::invalid_argument("leaky_relu: slope must be in [0,1)");
  auto x = input.data();
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0f ? x[i] : slope * x[i];
  Tensor in_ref = input;
  return Tensor::make_result("leaky_relu", input.shape(), std::move(out), {input},
                             [in_ref, slope](detail::Node& self) {
                               detail::Node* xn = in_ref.node();
                               xn->ensure_grad();
                               for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                 xn->grad[i] += xn->data[i] > 0.0f ? self.grad[i] : slope * self.grad[i];
                               }
                             });
}

Tensor batch_norm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                    Tensor& running_var, const BatchNormOptions& options) {
  require_rank(input, 4, "batch_norm2d", "input");
  const std::int64_t B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::int64_t hw = H * W;
  const std::int64_t n = B * hw;
  for (const Tensor* t : std::initializer_list<const Tensor*>{&gamma, &beta, &running_mean, &running_var}) {
    if (!t->defined() || t->shape() != Shape{C}) {
      throw ShapeError("batch_norm2d: per-channel parameter expected shape [" + std::to_string(C) + "]");
    }
  }
  const bool train = options.mode == Mode::Train;
  if (train && n < 2) {
    throw std::invalid_argument("batch_norm2d: train mode needs B*H*W >= 2 values per channel, got " +
                                std::to_string(n));
  }
  auto x = input.data();
  auto g = gamma.data();
  auto bt = beta.data();
  std::vector<float> xhat(x.size());
  std::vector<float> inv_std(static_cast<std::size_t>(C));
  std::vector<float> out(x.size());
  for (std::int64_t c = 0; c < C; ++c) {
    double mu, var;
    if (train) {
      double s = 0.0;
      for (std::int64_t b = 0; b < B; ++b) {
        const float* p = x.data() + (b * C + c) * hw;
        for (std::int64_t k = 0; k < hw; ++k) s += p[k];
      }
      mu = s / static_cast<double>(n);
      double ss = 0.0;
      for (std::int64_t b = 0; b < B; ++b) {
        const float* p = x.data() + (b * C + c) * hw;
        for (std::int64_t k = 0; k < hw; ++k) {
          const double d = p[k] - mu;
          ss += d * d;
        }
      }
      var = ss / static_cast<double>(n);
      auto rm = running_mean.mutable_data();
      auto rv = running_var.mutable_data();
      const double m = options.momentum;
      const double unbiased = var * static_cast<double>(n) / static_cast<double>(n - 1);
      rm[static_cast<std::size_t>(c)] = static_cast<float>((1.0 - m) * rm[static_cast<std::size_t>(c)] + m * mu);
      rv[static_cast<std::size_t>(c)] =
          static_cast<float>((1.0 - m) * rv[static_cast<std::size_t>(c)] + m * unbiased);
    } else {
      mu = running_mean.data()[static_cast<std::size_t>(c)];
      var = running_var.data()[static_cast<std::size_t>(c)];
    }
    const double is = 1.0 / std::sqrt(var + options.epsilon);
    inv_std[static_cast<std::size_t>(c)] = static_cast<float>(is);
    const float gc = g[static_cast<std::size_t>(c)], bc = bt[static_cast<std::size_t>(c)];
    for (std::int64_t b = 0; b < B; ++b) {
      const std::int64_t off = (b * C + c) * hw;
      for (std::int64_t k = 0; k < hw; ++k) {
        const float xh = static_cast<float>((x[static_cast<std::size_t>(off + k)] - mu) * is);
        xhat[static_cast<std::size_t>(off + k)] = xh;
        out[static_cast<std::size_t>(off + k)] = gc * xh + bc;
      }
    }
  }
  Tensor in_ref = input, g_ref = gamma, b_ref = beta;
  return Tensor::make_result(
      "batch_norm2d", input.shape(), std::move(out), {input, gamma, beta},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        detail::Node* xn = in_ref.node();
        detail::Node* gn = g_ref.node();
        detail::Node* bn = b_ref.node();
        const float* dy = self.grad.data();
        for (std::int64_t c = 0; c < C; ++c) {
          double sdy = 0.0, sdyx = 0.0;
          for (std::int64_t b = 0; b < B; ++b) {
            const std::int64_t off = (b * C + c) * hw;
            for (std::int64_t k = 0; k < hw; ++k) {
              sdy += dy[off + k];
              sdyx += static_cast<double>(dy[off + k]) * xhat[static_cast<std::size_t>(off + k)];
            }
          }
          if (gn->requires_grad) {
            gn->ensure_grad();
            gn->grad[static_cast<std::size_t>(c)] += static_cast<float>(sdyx);
          }
          if (bn->requires_grad) {
            bn->ensure_grad();
            bn->grad[static_cast<std::size_t>(c)] += static_cast<float>(sdy);
          }
          if (xn->requires_grad) {
            xn->ensure_grad();
            const double k0 = static_cast<double>(gn->data[static_cast<std::size_t>(c)]) *
                              inv_std[static_cast<std::size_t>(c)];
            const double mdy = sdy / static_cast<double>(n);
            const double mdyx = sdyx / static_cast<double>(n);
            for (std::int64_t b = 0; b < B; ++b) {
              const std::int64_t off = (b * C + c) * hw;
              for (std::int64_t k = 0; k < hw; ++k) {
                const auto i = static_cast<std::size_t>(off + k);
                if (train) {
                  xn->grad[i] += static_cast<float>(k0 * (dy[i] - mdy - xhat[i] * mdyx));
                } else {
                  xn->grad[i] += static_cast<float>(k0 * dy[i]);
                }
              }
            }
          }
        }
      });
}

namespace {
struct Tap {
  std::int64_t i0, i1;
  float w;  // weight of i1
};

std::vector<Tap> bilinear_taps(std::int64_t in, std::int64_t out, bool align_corners) {
  std::vector<Tap> taps(static_cast<std::size_t>(out));
  for (std::int64_t o = 0; o < out; ++o) {
    double src;
    if (align_corners) {
      src = out > 1 ? static_cast<double>(o) * static_cast<double>(in - 1) / static_cast<double>(out - 1) : 0.0;
    } else {
      src = (static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
      src = std::max(src, 0.0);
    }
    auto i0 = static_cast<std::int64_t>(std::floor(src));
    i0 = std::min(i0, in - 1);
    const std::int64_t i1 = std::min(i0 + 1, in - 1);
    taps[static_cast<std::size_t>(o)] = {i0, i1, static_cast<float>(src - static_cast<double>(i0))};
  }
  return taps;
}
}  // namespace

Tensor bilinear_upsample(const Tensor& input, std::int64_t out_h, std::int64_t out_w, bool align_corners) {
  require_rank(input, 4, "bilinear_upsample", "input");
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("bilinear_upsample: output size must be >= 1");
  const std::int64_t B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  auto ty = bilinear_taps(H, out_h, align_corners);
  auto tx = bilinear_taps(W, out_w, align_corners);
  auto x = input.data();
  std::vector<float> out(static_cast<std::size_t>(B * C * out_h * out_w));
  for (std::int64_t p = 0; p < B * C; ++p) {
    const float* src = x.data() + p * H * W;
    float* dst = out.data() + p * out_h * out_w;
    for (std::int64_t oy = 0; oy < out_h; ++oy) {
      const Tap& a = ty[static_cast<std::size_t>(oy)];
      const float* r0 = src + a.i0 * W;
      const float* r1 = src + a.i1 * W;
      for (std::int64_t ox = 0; ox < out_w; ++ox) {
        const Tap& b = tx[static_cast<std::size_t>(ox)];
        const float top = (1.0f - b.w) * r0[b.i0] + b.w * r0[b.i1];
        const float bot = (1.0f - b.w) * r1[b.i0] + b.w * r1[b.i1];
        dst[oy * out_w + ox] = (1.0f - a.w) * top + a.w * bot;
      }
    }
  }
  Tensor in_ref = input;
  return Tensor::make_result(
      "bilinear_upsample", {B, C, out_h, out_w}, std::move(out), {input},
      [=, ty = std::move(ty), tx = std::move(tx)](detail::Node& self) {
        detail::Node* xn = in_ref.node();
        xn->ensure_grad();
        for (std::int64_t p = 0; p < B * C; ++p) {
          float* gsrc = xn->grad.data() + p * H * W;
          const float* gdst = self.grad.data() + p * out_h * out_w;
          for (std::int64_t oy = 0; oy < out_h; ++oy) {
            const Tap& a = ty[static_cast<std::size_t>(oy)];
            for (std::int64_t ox = 0; ox < out_w; ++ox) {
              const Tap& b = tx[static_cast<std::size_t>(ox)];
              const float gv = gdst[oy * out_w + ox];
              const float gt = (1.0f - a.w) * gv, gb = a.w * gv;
              gsrc[a.i0 * W + b.i0] += (1.0f - b.w) * gt;
              gsrc[a.i0 * W + b.i1] += b.w * gt;
              gsrc[a.i1 * W + b.i0] += (1.0f - b.w) * gb;
              gsrc[a.i1 * W + b.i1] += b.w * gb;
            }
          }
        }
      });
}

Tensor dropout(const Tensor& input, float p, Mode mode, RngStream& rng) {
  if (!(p >= 0.0f && p < 1.0f)) throw std::invalid_argument("dropout: p must be in [0,1)");
  if (mode == Mode::Eval || p == 0.0f) return input;
  auto x = input.data();
  const float keep_scale = 1.0f / (1.0f - p);
  std::vector<float> mask(x.size());
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    mask[i] = rng.uniform() >= static_cast<double>(p) ? keep_scale : 0.0f;
    out[i] = x[i] * mask[i];
  }
  Tensor in_ref = input;
  return Tensor::make_result("dropout", input.shape(), std::move(out), {input},
                             [in_ref, mask = std::move(mask)](detail::Node& self) {
                               detail::Node* xn = in_ref.node();
                               xn->ensure_grad();
                               for (std::size_t i = 0; i < mask.size(); ++i) xn->grad[i] += self.grad[i] * mask[i];
                             });
}

Tensor sigmoid(const Tensor& input) {
  constexpr float lo = std::numeric_limits<float>::min();
  constexpr float hi = 1.0f - 0x1.0p-24f;
  auto x = input.data();
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    double y;
    if (v >= 0.0) {
      y = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      y = e / (1.0 + e);
    }
    out[i] = std::clamp(static_cast<float>(y), lo, hi);
  }
  Tensor in_ref = input;
  std::vector<float> saved = out;
  return Tensor::make_result("sigmoid", input.shape(), std::move(out), {input},
                             [in_ref, saved = std::move(saved)](detail::Node& self) {
                               detail::Node* xn = in_ref.node();
                               xn->ensure_grad();
                               for (std::size_t i = 0; i < saved.size(); ++i) {
                                 xn->grad[i] += self.grad[i] * saved[i] * (1.0f - saved[i]);
                               }
                             });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require_rank(a, 4, "concat_channels", "a");
  require_rank(b, 4, "concat_channels", "b");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ShapeError("concat_channels: operand 'b' expected shape [" + std::to_string(a.dim(0)) + ",C," +
                     std::to_string(a.dim(2)) + "," + std::to_string(a.dim(3)) + "], got " + shape_str(b.shape()));
  }
  const std::int64_t B = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  std::vector<float> out(static_cast<std::size_t>(B * (ca + cb) * hw));
  auto da = a.data();
  auto db = b.data();
  for (std::int64_t n = 0; n < B; ++n) {
    std::copy_n(da.data() + n * ca * hw, ca * hw, out.data() + n * (ca + cb) * hw);
    std::copy_n(db.data() + n * cb * hw, cb * hw, out.data() + n * (ca + cb) * hw + ca * hw);
  }
  Tensor ra = a, rb = b;
  return Tensor::make_result("concat_channels", {B, ca + cb, a.dim(2), a.dim(3)}, std::move(out), {a, b},
                             [=](detail::Node& self) {
                               detail::Node* an = ra.node();
                               detail::Node* bn = rb.node();
                               for (std::int64_t n = 0; n < B; ++n) {
                                 const float* g = self.grad.data() + n * (ca + cb) * hw;
                                 if (an->requires_grad) {
                                   an->ensure_grad();
                                   float* d = an->grad.data() + n * ca * hw;
                                   for (std::int64_t k = 0; k < ca * hw; ++k) d[k] += g[k];
                                 }
                                 if (bn->requires_grad) {
                                   bn->ensure_grad();
                                   float* d = bn->grad.data() + n * cb * hw;
                                   for (std::int64_t k = 0; k < cb * hw; ++k) d[k] += g[ca * hw + k];
                                 }
                               }
                             });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto da = a.data();
  auto db = b.data();
  std::vector<float> out(da.size());
  for (std::size_t i = 0; i < da.size(); ++i) out[i] = da[i] + db[i];
  Tensor ra = a, rb = b;
  return Tensor::make_result("add", a.shape(), std::move(out), {a, b}, [ra, rb](detail::Node& self) {
    for (detail::Node* n : {ra.node(), rb.node()}) {
      if (!n->requires_grad) continue;
      n->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) n->grad[i] += self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto da = a.data();
  auto db = b.data();
  std::vector<float> out(da.size());
  for (std::size_t i = 0; i < da.size(); ++i) out[i] = da[i] * db[i];
  Tensor ra = a, rb = b;
  return Tensor::make_result("mul", a.shape(), std::move(out), {a, b}, [ra, rb](detail::Node& self) {
    detail::Node* an = ra.node();
    detail::Node* bn = rb.node();
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * bn->data[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i] * an->data[i];
    }
  });
}

Tensor scale(const Tensor& a, float factor) {
  auto da = a.data();
  std::vector<float> out(da.size());
  for (std::size_t i = 0; i < da.size(); ++i) out[i] = da[i] * factor;
  Tensor ra = a;
  return Tensor::make_result("scale", a.shape(), std::move(out), {a}, [ra, factor](detail::Node& self) {
    detail::Node* n = ra.node();
    n->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) n->grad[i] += self.grad[i] * factor;
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (float v : a.data()) s += v;
  Tensor ra = a;
  return Tensor::make_result("sum", {}, {static_cast<float>(s)}, {a}, [ra](detail::Node& self) {
    detail::Node* n = ra.node();
    n->ensure_grad();
    const float g = self.grad[0];
    for (auto& v : n->grad) v += g;
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), 1.0f / static_cast<float>(a.numel()));
}

}  // namespace fedgin
