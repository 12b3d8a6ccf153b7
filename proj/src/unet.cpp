#include "fedgin/unet.hpp"

#include "fedgin/optim.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace fedgin {

namespace {

void add_conv(ModelParams& p, const std::string& name, int cin, int cout, int k, float slope, RngStream& rng) {
  const std::int64_t fan_in = static_cast<std::int64_t>(cin) * k * k;
  p.add(name + ".weight", kaiming_init({cout, cin, k, k}, fan_in, slope, rng));
  p.add(name + ".bias", Tensor::zeros({cout}, true));
}

void add_bn(ModelParams& p, const std::string& name, int c) {
  p.add(name + ".gamma", Tensor::full({c}, 1.0f, true));
  p.add(name + ".beta", Tensor::zeros({c}, true));
  p.add(name + ".running_mean", Tensor::zeros({c}));
  p.add(name + ".running_var", Tensor::full({c}, 1.0f));
}

// conv -> bn -> leaky unit named `name` (".conv" / ".bn").
void add_unit(ModelParams& p, const std::string& name, int cin, int cout, float slope, RngStream& rng) {
  add_conv(p, name + ".conv", cin, cout, 3, slope, rng);
  add_bn(p, name + ".bn", cout);
}

struct Runner {
  const ModelParams& params;
  const UNetConfig& cfg;
  Mode mode;
  RngStream& rng;

  Tensor unit(const Tensor& x, const std::string& name, int stride) const {
    Tensor rm = params.at(name + ".bn.running_mean");
    Tensor rv = params.at(name + ".bn.running_var");
    Tensor h = conv2d(x, params.at(name + ".conv.weight"), params.at(name + ".conv.bias"), stride, 1);
    h = batch_norm2d(h, params.at(name + ".bn.gamma"), params.at(name + ".bn.beta"), rm, rv,
                     {mode, cfg.bn_momentum, cfg.bn_epsilon});
    return leaky_relu(h, cfg.leaky_slope);
  }

  Tensor block(const Tensor& x, const std::string& name, float p) const {
    Tensor h = unit(x, name + ".unit1", 1);
    h = unit(h, name + ".unit2", 1);
    return dropout(h, p, mode, rng);
  }
};

}  // namespace

void UNetConfig::validate() const {
  if (depth < 1) throw std::invalid_argument("unet: depth must be >= 1");
  if (base_channels < 1) throw std::invalid_argument("unet: base_channels must be >= 1");
  if (in_channels < 1 || out_channels < 1) throw std::invalid_argument("unet: channel counts must be >= 1");
  if (!(dropout_p >= 0.0f && dropout_p < 1.0f) || !(bottleneck_dropout_p >= 0.0f && bottleneck_dropout_p < 1.0f)) {
    throw std::invalid_argument("unet: dropout probabilities must be in [0,1)");
  }
}

ModelParams build_model(const UNetConfig& c, RngStream& rng) {
  c.validate();
  ModelParams p;
  int cin = c.in_channels;
  for (int i = 0; i < c.depth; ++i) {
    const std::string e = "enc" + std::to_string(i);
    add_unit(p, e + ".unit1", cin, c.channels_at(i), c.leaky_slope, rng);
    add_unit(p, e + ".unit2", c.channels_at(i), c.channels_at(i), c.leaky_slope, rng);
    add_unit(p, "down" + std::to_string(i), c.channels_at(i), c.channels_at(i), c.leaky_slope, rng);
    cin = c.channels_at(i);
  }
  add_unit(p, "bottleneck.unit1", cin, c.channels_at(c.depth), c.leaky_slope, rng);
  add_unit(p, "bottleneck.unit2", c.channels_at(c.depth), c.channels_at(c.depth), c.leaky_slope, rng);
  for (int i = c.depth - 1; i >= 0; --i) {
    const std::string d = "dec" + std::to_string(i);
    add_unit(p, d + ".unit1", c.channels_at(i + 1) + c.channels_at(i), c.channels_at(i), c.leaky_slope, rng);
    add_unit(p, d + ".unit2", c.channels_at(i), c.channels_at(i), c.leaky_slope, rng);
  }
  add_conv(p, "head", c.channels_at(0), c.out_channels, 1, c.leaky_slope, rng);
  return p;
}

Tensor standardize_per_sample(const Tensor& x) {
  const std::int64_t b = x.dim(0), n = x.numel() / b;
  const auto in = x.data();
  std::vector<float> out(in.size());
  for (std::int64_t s = 0; s < b; ++s) {
    const std::size_t lo = static_cast<std::size_t>(s * n), hi = lo + static_cast<std::size_t>(n);
    double mean = 0.0, sq = 0.0;
    for (std::size_t i = lo; i < hi; ++i) mean += in[i];
    mean /= static_cast<double>(n);
    for (std::size_t i = lo; i < hi; ++i) sq += (in[i] - mean) * (in[i] - mean);
    const double inv = 1.0 / (std::sqrt(sq / static_cast<double>(n)) + 1e-5);
    for (std::size_t i = lo; i < hi; ++i) out[i] = static_cast<float>((in[i] - mean) * inv);
  }
  return Tensor::from_data(x.shape(), std::move(out));
}

Tensor unet_forward(const ModelParams& params, const UNetConfig& c, const Tensor& x, Mode mode, RngStream& rng) {
  if (x.ndim() != 4 || x.dim(1) != c.in_channels) {
    throw ShapeError("unet_forward: input expected [B," + std::to_string(c.in_channels) + ",H,W], got " +
                     shape_str(x.shape()));
  }
  const std::int64_t div = std::int64_t{1} << c.depth;
  if (x.dim(2) % div != 0 || x.dim(3) % div != 0) {
    throw ShapeError("unet_forward: input spatial size " + std::to_string(x.dim(2)) + "x" +
                     std::to_string(x.dim(3)) + " not divisible by 2^depth = " + std::to_string(div));
  }
  Runner r{params, c, mode, rng};
  std::vector<Tensor> skips;
  Tensor h = c.standardize_input ? standardize_per_sample(x) : x;
  for (int i = 0; i < c.depth; ++i) {
    h = r.block(h, "enc" + std::to_string(i), c.dropout_p);
    skips.push_back(h);
    h = r.unit(h, "down" + std::to_string(i), 2);
  }
  h = r.block(h, "bottleneck", c.bottleneck_dropout_p);
  for (int i = c.depth - 1; i >= 0; --i) {
    const Tensor& skip = skips[static_cast<std::size_t>(i)];
    h = bilinear_upsample(h, skip.dim(2), skip.dim(3), true);
    h = concat_channels(h, skip);
    h = r.block(h, "dec" + std::to_string(i), c.dropout_p);
  }
  h = conv2d(h, params.at("head.weight"), params.at("head.bias"), 1, 0);
  return sigmoid(h);
}

}  // namespace fedgin
