#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "segkit/nn.hpp"

namespace segkit {

struct DCNConfig {
  std::array<std::int64_t, 4> channels{32, 64, 128, 256};
  std::array<int, 4> depths{1, 1, 2, 1};
  std::array<int, 4> groups{2, 4, 8, 16};
  double mlp_ratio = 4.0;
  /// Offsets are clamped to +-offset_bound pixels; 0 leaves them unbounded.
  double offset_bound = 0.0;

  void validate() const;
  static DCNConfig toy();
  /// Sized so backbone, UperNet and auxiliary head total about 128M parameters.
  static DCNConfig base();
};

/// Four maps at strides 4, 8, 16, 32, each [H/s, W/s, C_i].
struct FeaturePyramid {
  std::array<Var, 4> levels;
  static constexpr std::array<int, 4> strides{4, 8, 16, 32};
};

/// Bilinear read of feature [H, W, C] at real (y, x); corners outside the map read zero.
std::vector<double> bilinear_sample(const Tensor& feature, double y, double x);

struct DcnV3Weights {
  Var input_weight;  // [G, C/G, C/G]
  Var input_bias;    // [C]
  Var dw_weight;     // [9, C]
  Var dw_bias;
  LayerNorm offset_norm;
  Linear offset;      // C -> G*9*2, zero-initialized
  Linear modulation;  // C -> G*9, zero-initialized
  Linear output;      // C -> C
  int groups = 1;
  double offset_bound = 0.0;
};

DcnV3Weights make_dcn_v3(ParameterSet& ps, const std::string& name, std::int64_t channels, int groups,
                         double offset_bound = 0.0);

/// Per-location offsets [H, W, G*9*2] and softmax-normalized modulation [H, W, G*9].
struct DcnSampling {
  Var offsets;
  Var modulation;
};
DcnSampling dcn_v3_sampling(const Var& x, const DcnV3Weights& w);

/// Deformable 3x3 aggregation with learned offsets and per-group softmax modulation.
Var dcn_v3(const Var& x, const DcnV3Weights& w);

struct DcnBlockWeights {
  LayerNorm norm1;
  DcnV3Weights dcn;
  LayerNorm norm2;
  Linear fc1;
  Linear fc2;
};

DcnBlockWeights make_dcn_block(ParameterSet& ps, const std::string& name, std::int64_t channels, int groups,
                               double mlp_ratio, double offset_bound = 0.0);

/// x + dcn_v3(LN(x)), then + FFN(LN(x)).
Var basic_block(const Var& x, const DcnBlockWeights& w);

/// Hierarchical backbone. Parameter names are `<prefix>.stem.*`,
/// `<prefix>.stages.<s>.blocks.<b>.*` and `<prefix>.downsample.<s>.*`.
class DcnBackbone {
 public:
  DcnBackbone(ParameterSet& ps, const std::string& prefix, const DCNConfig& config);

  const DCNConfig& config() const { return config_; }
  /// Image [H, W, 3] with H, W divisible by 32.
  FeaturePyramid forward(const Var& image) const;

 private:
  struct ConvNorm {
    Conv2d conv;
    LayerNorm norm;
  };

  DCNConfig config_;
  ConvNorm stem1_, stem2_;
  std::array<std::vector<DcnBlockWeights>, 4> stages_;
  std::array<ConvNorm, 3> downsample_;
};

}  // namespace segkit
