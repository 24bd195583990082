#include "segkit/dcn.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace segkit {

namespace {

constexpr int kPoints = 9;

Var clamp_values(const Var& x, double bound) {
  Tensor out = x.value();
  for (auto& v : out.values()) v = std::clamp(v, -bound, bound);
  return make_result(std::move(out), {x}, [bound](Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = p.value[i];
      if (v > -bound && v < bound) g[i] += self.grad[i];
    }
  });
}

}  // namespace

void DCNConfig::validate() const {
  for (int s = 0; s < 4; ++s) {
    if (channels[s] <= 0 || depths[s] < 0 || groups[s] <= 0) throw std::invalid_argument("DCNConfig: sizes must be positive");
    if (channels[s] % groups[s] != 0) {
      throw std::invalid_argument("DCNConfig: stage " + std::to_string(s) + " channels " + std::to_string(channels[s]) +
                                  " not divisible by groups " + std::to_string(groups[s]));
    }
  }
  if (channels[0] % 2 != 0) throw std::invalid_argument("DCNConfig: first stage channels must be even");
  if (mlp_ratio <= 0) throw std::invalid_argument("DCNConfig: mlp_ratio must be positive");
  if (offset_bound < 0) throw std::invalid_argument("DCNConfig: offset_bound must be non-negative");
}

DCNConfig DCNConfig::toy() { return DCNConfig{}; }

DCNConfig DCNConfig::base() {
  DCNConfig c;
  c.channels = {112, 224, 448, 896};
  c.depths = {4, 4, 21, 4};
  c.groups = {7, 14, 28, 56};
  return c;
}

std::vector<double> bilinear_sample(const Tensor& feature, double y, double x) {
  if (feature.rank() != 3) throw std::invalid_argument("bilinear_sample: expected [H, W, C]");
  const auto h = feature.dim(0), w = feature.dim(1), c = feature.dim(2);
  std::vector<double> out(static_cast<std::size_t>(c), 0.0);
  const double fy = std::floor(y), fx = std::floor(x);
  const double ty = y - fy, tx = x - fx;
  const auto y0 = static_cast<std::int64_t>(fy), x0 = static_cast<std::int64_t>(fx);
  const std::int64_t ys[2] = {y0, y0 + 1}, xs[2] = {x0, x0 + 1};
  const double wy[2] = {1.0 - ty, ty}, wx[2] = {1.0 - tx, tx};
  for (int a = 0; a < 2; ++a) {
    for (int b = 0; b < 2; ++b) {
      if (ys[a] < 0 || ys[a] >= h || xs[b] < 0 || xs[b] >= w) continue;
      const double wt = wy[a] * wx[b];
      if (wt == 0.0) continue;
      const double* src = feature.data() + (ys[a] * w + xs[b]) * c;
      for (std::int64_t ch = 0; ch < c; ++ch) out[static_cast<std::size_t>(ch)] += wt * src[ch];
    }
  }
  return out;
}

DcnV3Weights make_dcn_v3(ParameterSet& ps, const std::string& name, std::int64_t channels, int groups,
                         double offset_bound) {
  if (groups <= 0 || channels % groups != 0) throw std::invalid_argument("make_dcn_v3: channels not divisible by groups");
  DcnV3Weights w;
  const auto cg = channels / groups;
  w.groups = groups;
  w.offset_bound = offset_bound;
  w.input_weight = ps.add(name + ".input_proj.weight", {groups, cg, cg}, Init::trunc_normal(0.02));
  w.input_bias = ps.add(name + ".input_proj.bias", {channels}, Init::zeros(), false);
  w.dw_weight = ps.add(name + ".dw_conv.weight", {kPoints, channels}, Init::kaiming(kPoints));
  w.dw_bias = ps.add(name + ".dw_conv.bias", {channels}, Init::zeros(), false);
  w.offset_norm = make_layer_norm(ps, name + ".dw_norm", channels);
  w.offset = make_linear(ps, name + ".offset", channels, groups * kPoints * 2, Init::zeros());
  w.modulation = make_linear(ps, name + ".mask", channels, groups * kPoints, Init::zeros());
  w.output = make_linear(ps, name + ".output_proj", channels, channels, Init::trunc_normal(0.02));
  return w;
}

DcnSampling dcn_v3_sampling(const Var& x, const DcnV3Weights& w) {
  const auto h = x.value().dim(0), wd = x.value().dim(1);
  const Var feat = ops::gelu(w.offset_norm(ops::depthwise_conv3x3(x, w.dw_weight, w.dw_bias)));
  DcnSampling s;
  s.offsets = w.offset(feat);
  if (w.offset_bound > 0.0) s.offsets = clamp_values(s.offsets, w.offset_bound);
  const Var logits = ops::reshape(w.modulation(feat), {h * wd * w.groups, kPoints});
  s.modulation = ops::reshape(ops::softmax_rows(logits), {h, wd, static_cast<std::int64_t>(w.groups) * kPoints});
  return s;
}

Var dcn_v3(const Var& x, const DcnV3Weights& w) {
  if (x.value().rank() != 3) throw std::invalid_argument("dcn_v3: expected [H, W, C]");
  const Var value = ops::grouped_linear(x, w.input_weight, w.input_bias);
  const auto s = dcn_v3_sampling(x, w);
  return w.output(ops::dcn_sample(value, s.offsets, s.modulation, w.groups));
}

DcnBlockWeights make_dcn_block(ParameterSet& ps, const std::string& name, std::int64_t channels, int groups,
                               double mlp_ratio, double offset_bound) {
  const auto hidden = static_cast<std::int64_t>(static_cast<double>(channels) * mlp_ratio);
  DcnBlockWeights b;
  b.norm1 = make_layer_norm(ps, name + ".norm1", channels);
  b.dcn = make_dcn_v3(ps, name + ".dcn", channels, groups, offset_bound);
  b.norm2 = make_layer_norm(ps, name + ".norm2", channels);
  b.fc1 = make_linear(ps, name + ".mlp.fc1", channels, hidden, Init::trunc_normal(0.02));
  b.fc2 = make_linear(ps, name + ".mlp.fc2", hidden, channels, Init::trunc_normal(0.02));
  return b;
}

Var basic_block(const Var& x, const DcnBlockWeights& w) {
  const Var h = ops::add(x, dcn_v3(w.norm1(x), w.dcn));
  return ops::add(h, w.fc2(ops::gelu(w.fc1(w.norm2(h)))));
}

DcnBackbone::DcnBackbone(ParameterSet& ps, const std::string& prefix, const DCNConfig& config) : config_(config) {
  config_.validate();
  const auto& ch = config_.channels;
  stem1_ = {make_conv(ps, prefix + ".stem.conv1", 3, ch[0] / 2, 3, 2, 1), make_layer_norm(ps, prefix + ".stem.norm1", ch[0] / 2)};
  stem2_ = {make_conv(ps, prefix + ".stem.conv2", ch[0] / 2, ch[0], 3, 2, 1), make_layer_norm(ps, prefix + ".stem.norm2", ch[0])};
  for (int s = 0; s < 4; ++s) {
    for (int b = 0; b < config_.depths[s]; ++b) {
      stages_[s].push_back(make_dcn_block(ps, prefix + ".stages." + std::to_string(s) + ".blocks." + std::to_string(b),
                                          ch[s], config_.groups[s], config_.mlp_ratio, config_.offset_bound));
    }
    if (s < 3) {
      const auto name = prefix + ".downsample." + std::to_string(s);
      downsample_[s] = {make_conv(ps, name + ".conv", ch[s], ch[s + 1], 3, 2, 1, false), make_layer_norm(ps, name + ".norm", ch[s + 1])};
    }
  }
}

FeaturePyramid DcnBackbone::forward(const Var& image) const {
  const auto& v = image.value();
  if (v.rank() != 3 || v.dim(2) != 3) throw std::invalid_argument("DcnBackbone: expected [H, W, 3] image");
  if (v.dim(0) % 32 != 0 || v.dim(1) % 32 != 0) {
    throw std::invalid_argument("DcnBackbone: resolution " + std::to_string(v.dim(0)) + "x" + std::to_string(v.dim(1)) +
                                " is not divisible by 32");
  }
  Var x = ops::gelu(stem1_.norm(stem1_.conv(image)));
  x = stem2_.norm(stem2_.conv(x));
  FeaturePyramid out;
  for (int s = 0; s < 4; ++s) {
    for (const auto& b : stages_[s]) x = basic_block(x, b);
    out.levels[s] = x;
    if (s < 3) x = downsample_[s].norm(downsample_[s].conv(x));
  }
  return out;
}

}  // namespace segkit
