#include "segkit/upernet.hpp"

#include <stdexcept>

namespace segkit {

namespace {

Var resize_to(const Var& x, std::int64_t h, std::int64_t w) {
  if (x.value().dim(0) == h && x.value().dim(1) == w) return x;
  return ops::resize_bilinear(x, h, w);
}

}  // namespace

void UperNetConfig::validate() const {
  for (auto c : in_channels)
    if (c <= 0) throw std::invalid_argument("UperNetConfig: input channels must be positive");
  if (channels <= 0 || num_classes <= 0) throw std::invalid_argument("UperNetConfig: channels and classes must be positive");
  for (int s : pool_scales)
    if (s <= 0) throw std::invalid_argument("UperNetConfig: pool scales must be positive");
  if (aux_level < 0 || aux_level > 3) throw std::invalid_argument("UperNetConfig: aux_level must be 0..3");
}

ConvModule make_conv_module(ParameterSet& ps, const std::string& name, std::int64_t in, std::int64_t out, int kernel) {
  return {make_conv(ps, name + ".conv", in, out, kernel, 1, kernel / 2, false), make_layer_norm(ps, name + ".norm", out)};
}

UperNetHead::UperNetHead(ParameterSet& ps, const std::string& prefix, const UperNetConfig& config) : config_(config) {
  config_.validate();
  const auto ch = config_.channels;
  const auto& in = config_.in_channels;
  for (std::size_t i = 0; i < config_.pool_scales.size(); ++i) {
    ppm_.push_back(make_conv_module(ps, prefix + ".psp." + std::to_string(i), in[3], ch, 1));
  }
  ppm_bottleneck_ = make_conv_module(ps, prefix + ".psp_bottleneck", in[3] + ch * static_cast<std::int64_t>(ppm_.size()), ch, 3);
  for (int i = 0; i < 3; ++i) {
    lateral_.push_back(make_conv_module(ps, prefix + ".lateral." + std::to_string(i), in[i], ch, 1));
    fpn_.push_back(make_conv_module(ps, prefix + ".fpn." + std::to_string(i), ch, ch, 3));
  }
  fpn_bottleneck_ = make_conv_module(ps, prefix + ".fpn_bottleneck", 4 * ch, ch, 3);
  classifier_ = make_conv(ps, prefix + ".classifier", ch, config_.num_classes, 1, 1, 0);
  if (config_.aux_head) {
    aux_conv_ = make_conv_module(ps, prefix + ".aux.conv", in[config_.aux_level], config_.aux_channels, 3);
    aux_classifier_ = make_conv(ps, prefix + ".aux.classifier", config_.aux_channels, config_.num_classes, 1, 1, 0);
  }
}

UperNetHead::Output UperNetHead::forward(const std::vector<Var>& levels, std::int64_t out_h, std::int64_t out_w) const {
  if (levels.size() != 4) {
    throw std::invalid_argument("UperNetHead: expected 4 feature levels, got " + std::to_string(levels.size()));
  }
  for (std::size_t i = 0; i < 4; ++i) {
    if (!levels[i].defined()) throw std::invalid_argument("UperNetHead: feature level " + std::to_string(i) + " is missing");
    const auto& v = levels[i].value();
    if (v.rank() != 3 || v.dim(2) != config_.in_channels[i]) {
      throw std::invalid_argument("UperNetHead: level " + std::to_string(i) + " has shape " + shape_string(v.shape()));
    }
  }
  const Var& top = levels[3];
  const auto th = top.value().dim(0), tw = top.value().dim(1);
  std::vector<Var> psp{top};
  for (std::size_t i = 0; i < ppm_.size(); ++i) {
    const int s = config_.pool_scales[i];
    psp.push_back(resize_to(ppm_[i](ops::adaptive_avg_pool(top, s, s)), th, tw));
  }
  std::vector<Var> lat(4);
  for (int i = 0; i < 3; ++i) lat[i] = lateral_[i](levels[i]);
  lat[3] = ppm_bottleneck_(ops::concat_last(psp));
  for (int i = 3; i > 0; --i) {
    lat[i - 1] = ops::add(lat[i - 1], resize_to(lat[i], lat[i - 1].value().dim(0), lat[i - 1].value().dim(1)));
  }
  const auto h0 = lat[0].value().dim(0), w0 = lat[0].value().dim(1);
  std::vector<Var> outs(4);
  for (int i = 0; i < 3; ++i) outs[i] = resize_to(fpn_[i](lat[i]), h0, w0);
  outs[3] = resize_to(lat[3], h0, w0);
  Output out;
  out.logits = resize_to(classifier_(fpn_bottleneck_(ops::concat_last(outs))), out_h, out_w);
  if (config_.aux_head) {
    out.aux = resize_to(aux_classifier_(aux_conv_(levels[config_.aux_level])), out_h, out_w);
  }
  return out;
}

}  // namespace segkit
