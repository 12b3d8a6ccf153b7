#include "fedgin/gin.hpp"

#include "fedgin/log.hpp"
#include "fedgin/ops.hpp"

#include <cmath>
#include <stdexcept>

namespace fedgin {

void GinConfig::validate() const {
  if (num_layers < 1) throw std::invalid_argument("gin: num_layers must be >= 1");
  if (hidden_channels < 1) throw std::invalid_argument("gin: hidden_channels must be >= 1");
  if (kernel_size < 1 || kernel_size % 2 == 0) throw std::invalid_argument("gin: kernel_size must be odd");
  if (!(leaky_slope >= 0.0f && leaky_slope < 1.0f)) throw std::invalid_argument("gin: slope must be in [0,1)");
  if (fixed_alpha && !(*fixed_alpha >= 0.0f && *fixed_alpha <= 1.0f)) {
    throw std::invalid_argument("gin: fixed alpha must be in [0,1]");
  }
}

GinNetwork gin_sample(const GinConfig& config, std::int64_t channels, RngStream& rng) {
  config.validate();
  GinNetwork net;
  const std::int64_t k = config.kernel_size;
  for (int layer = 0; layer < config.num_layers; ++layer) {
    const std::int64_t cin = layer == 0 ? channels : config.hidden_channels;
    const std::int64_t cout = layer == config.num_layers - 1 ? channels : config.hidden_channels;
    auto w = Tensor::zeros({cout, cin, k, k});
    for (auto& v : w.mutable_data()) v = static_cast<float>(rng.normal());
    auto b = Tensor::zeros({cout});
    for (auto& v : b.mutable_data()) v = static_cast<float>(rng.normal());
    net.weights.push_back(std::move(w));
    net.biases.push_back(std::move(b));
  }
  const double u = rng.uniform();
  net.alpha = config.fixed_alpha ? *config.fixed_alpha : static_cast<float>(u);
  return net;
}

Tensor gin_network_forward(const Tensor& x, const GinNetwork& net, const GinConfig& config) {
  NoGradGuard no_grad;
  Tensor h = x.detach();
  const int pad = config.kernel_size / 2;
  for (std::size_t i = 0; i < net.weights.size(); ++i) {
    h = conv2d(h, net.weights[i], net.biases[i], 1, pad);
    if (i + 1 < net.weights.size()) h = leaky_relu(h, config.leaky_slope);
  }
  return h;
}

namespace {

double frobenius(const float* p, std::int64_t n) {
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) s += static_cast<double>(p[i]) * p[i];
  return std::sqrt(s);
}

// Blends one sample into `out`; returns false when the blend has zero norm.
bool blend_sample(const float* x, const float* net_out, float alpha, std::int64_t n, float* out) {
  const double x_norm = frobenius(x, n);
  std::vector<double> mixed(static_cast<std::size_t>(n));
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    mixed[static_cast<std::size_t>(i)] =
        static_cast<double>(alpha) * net_out[i] + (1.0 - static_cast<double>(alpha)) * x[i];
    s += mixed[static_cast<std::size_t>(i)] * mixed[static_cast<std::size_t>(i)];
  }
  const double m_norm = std::sqrt(s);
  if (m_norm == 0.0 || !std::isfinite(m_norm)) {
    if (x_norm == 0.0 && m_norm == 0.0) {
      std::fill(out, out + n, 0.0f);
      return true;
    }
    return false;
  }
  const double ratio = x_norm / m_norm;
  for (std::int64_t i = 0; i < n; ++i) out[i] = static_cast<float>(mixed[static_cast<std::size_t>(i)] * ratio);
  return true;
}

}  // namespace

Tensor gin_apply(const Tensor& x, const GinNetwork& net, const GinConfig& config, RngStream* resample_rng) {
  if (x.ndim() != 4) throw ShapeError("gin_apply: input expected [B,C,H,W], got " + shape_str(x.shape()));
  const std::int64_t B = x.dim(0);
  const std::int64_t n = x.numel() / std::max<std::int64_t>(B, 1);
  Tensor net_out = gin_network_forward(x, net, config);
  auto xd = x.data();
  auto nd = net_out.data();
  std::vector<float> out(xd.size());
  for (std::int64_t b = 0; b < B; ++b) {
    const float* xb = xd.data() + b * n;
    float* ob = out.data() + b * n;
    if (blend_sample(xb, nd.data() + b * n, net.alpha, n, ob)) continue;
    bool done = false;
    if (resample_rng != nullptr) {
      GinNetwork retry = gin_sample(config, x.dim(1), *resample_rng);
      Shape one{1, x.dim(1), x.dim(2), x.dim(3)};
      auto xs = Tensor::from_data(one, std::vector<float>(xb, xb + n));
      auto rs = gin_network_forward(xs, retry, config);
      done = blend_sample(xb, rs.data().data(), retry.alpha, n, ob);
    }
    if (!done) {
      log::warn("gin_apply: augmented sample ", b, " has zero norm, passing input through unchanged");
      std::copy(xb, xb + n, ob);
    }
  }
  check_finite(out, "gin_apply output");
  return Tensor::from_data(x.shape(), std::move(out));
}

Tensor gin_augment(const Tensor& x, const GinConfig& config, RngStream& rng) {
  if (!config.per_sample || x.ndim() != 4 || x.dim(0) == 1) {
    GinNetwork net = gin_sample(config, x.dim(1), rng);
    return gin_apply(x, net, config, &rng);
  }
  const std::int64_t b = x.dim(0);
  const std::size_t per = static_cast<std::size_t>(x.numel() / b);
  std::vector<float> out(x.data().size());
  for (std::int64_t s = 0; s < b; ++s) {
    const auto src = x.data().subspan(per * static_cast<std::size_t>(s), per);
    const Tensor one = Tensor::from_data({1, x.dim(1), x.dim(2), x.dim(3)}, {src.begin(), src.end()});
    GinNetwork net = gin_sample(config, x.dim(1), rng);
    const Tensor y = gin_apply(one, net, config, &rng);
    std::copy(y.data().begin(), y.data().end(), out.begin() + static_cast<std::ptrdiff_t>(per * static_cast<std::size_t>(s)));
  }
  return Tensor::from_data(x.shape(), std::move(out));
}

}  // namespace fedgin
