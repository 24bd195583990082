#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "segkit/dataset.hpp"
#include "segkit/dcn.hpp"
#include "segkit/upernet.hpp"
#include "segkit/vit.hpp"

namespace segkit {

enum class BackboneKind { ViT, DCN };

BackboneKind parse_backbone(const std::string& name);
std::string backbone_name(BackboneKind kind);

struct SegModelConfig {
  BackboneKind backbone = BackboneKind::ViT;
  ViTConfig vit = ViTConfig::toy();
  DCNConfig dcn = DCNConfig::toy();
  std::int64_t num_classes = 5;
  std::int64_t decoder_channels = 32;
  bool aux_head = true;
  std::int64_t aux_channels = 32;
  Normalization normalization;

  void validate() const;
  static SegModelConfig toy(BackboneKind backbone, std::int64_t num_classes);
  /// ViT-L/16 or the base DCN backbone with a 512-channel decoder.
  static SegModelConfig at_scale(BackboneKind backbone, std::int64_t num_classes);
};

/// Encoder depths whose outputs feed the decoder: L/4, L/2, 3L/4, L.
std::vector<int> vit_tap_depths(int depth);

/// Backbone plus UperNet head. Inputs to `forward` are normalized [H, W, 3]
/// images; `predict_*` take raw [0, 1] images and normalize internally.
/// Parameters are named `encoder.*` (ViT), `backbone.*` (DCN), `neck.*` and `decode_head.*`.
class SegmentationModel {
 public:
  /// With `materialize` false only names and shapes are recorded; such a model
  /// reports its parameter count but cannot run.
  SegmentationModel(const SegModelConfig& config, std::uint64_t seed, bool materialize = true);

  const SegModelConfig& config() const { return config_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }
  std::int64_t num_classes() const { return config_.num_classes; }

  UperNetHead::Output forward(const Tensor& image, Rng* rng = nullptr) const;
  /// Logits [H, W, C] without recording a tape.
  Tensor predict_logits(const Tensor& image) const;
  Mask predict(const Tensor& image) const;
  /// Both spatial sizes must be multiples of this.
  int size_multiple() const;

 private:
  std::vector<Var> vit_levels(const Tensor& image, Rng* rng) const;

  SegModelConfig config_;
  ParameterSet params_;
  std::unique_ptr<VisionTransformer> vit_;
  std::unique_ptr<DcnBackbone> dcn_;
  std::vector<LayerNorm> neck_norms_;
  std::unique_ptr<UperNetHead> head_;
};

/// Parameter count of a model built from `config`, without allocating weights.
std::int64_t count_parameters(const SegModelConfig& config);

/// Pixel cross-entropy; adds aux_weight times the auxiliary loss when aux is defined.
Var seg_loss(const Var& logits, const Mask& mask, const Var& aux = {}, double aux_weight = 0.4);

/// Per-pixel argmax of [H, W, C] logits; ties take the lowest class.
Mask argmax_mask(const Tensor& logits);

}  // namespace segkit
