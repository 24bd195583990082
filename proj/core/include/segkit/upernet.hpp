#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "segkit/nn.hpp"

namespace segkit {

struct UperNetConfig {
  std::array<std::int64_t, 4> in_channels{64, 64, 64, 64};
  std::int64_t channels = 512;
  std::int64_t num_classes = 2;
  std::array<int, 4> pool_scales{1, 2, 3, 6};
  bool aux_head = true;
  std::int64_t aux_channels = 256;
  /// Pyramid level feeding the auxiliary head (2 = stride 16).
  int aux_level = 2;

  void validate() const;
};

/// Convolution, per-pixel channel LayerNorm, ReLU.
struct ConvModule {
  Conv2d conv;
  LayerNorm norm;
  Var operator()(const Var& x) const { return ops::relu(norm(conv(x))); }
};

ConvModule make_conv_module(ParameterSet& ps, const std::string& name, std::int64_t in, std::int64_t out, int kernel);

/// Pyramid pooling on the deepest level, top-down FPN fusion, stride-4 fusion
/// of all levels and a per-pixel classifier, upsampled to the requested size.
class UperNetHead {
 public:
  UperNetHead(ParameterSet& ps, const std::string& prefix, const UperNetConfig& config);

  struct Output {
    Var logits;  // [out_h, out_w, C]
    Var aux;     // undefined without an auxiliary head
  };

  /// `levels` at strides 4, 8, 16, 32.
  Output forward(const std::vector<Var>& levels, std::int64_t out_h, std::int64_t out_w) const;
  const UperNetConfig& config() const { return config_; }

 private:
  UperNetConfig config_;
  std::vector<ConvModule> ppm_;
  ConvModule ppm_bottleneck_;
  std::vector<ConvModule> lateral_;
  std::vector<ConvModule> fpn_;
  ConvModule fpn_bottleneck_;
  Conv2d classifier_;
  ConvModule aux_conv_;
  Conv2d aux_classifier_;
};

}  // namespace segkit
