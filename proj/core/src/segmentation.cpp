#include "segkit/segmentation.hpp"

#include <stdexcept>

namespace segkit {

BackboneKind parse_backbone(const std::string& name) {
  if (name == "vit") return BackboneKind::ViT;
  if (name == "dcn") return BackboneKind::DCN;
  throw std::invalid_argument("unknown backbone '" + name + "' (expected vit or dcn)");
}

std::string backbone_name(BackboneKind kind) { return kind == BackboneKind::ViT ? "vit" : "dcn"; }

void SegModelConfig::validate() const {
  if (num_classes < 2) throw std::invalid_argument("SegModelConfig: need at least 2 classes");
  if (decoder_channels <= 0 || aux_channels <= 0) throw std::invalid_argument("SegModelConfig: channels must be positive");
  if (backbone == BackboneKind::ViT) {
    vit.validate();
    if (vit.depth < 4) throw std::invalid_argument("SegModelConfig: ViT depth must be at least 4 for four taps");
  } else {
    dcn.validate();
  }
}

SegModelConfig SegModelConfig::toy(BackboneKind backbone, std::int64_t num_classes) {
  SegModelConfig c;
  c.backbone = backbone;
  c.num_classes = num_classes;
  return c;
}

SegModelConfig SegModelConfig::at_scale(BackboneKind backbone, std::int64_t num_classes) {
  SegModelConfig c;
  c.backbone = backbone;
  c.vit = ViTConfig::large();
  c.vit.image_size = 512;
  c.dcn = DCNConfig::base();
  c.num_classes = num_classes;
  c.decoder_channels = 512;
  c.aux_channels = 256;
  return c;
}

std::vector<int> vit_tap_depths(int depth) { return {depth / 4, depth / 2, 3 * depth / 4, depth}; }

SegmentationModel::SegmentationModel(const SegModelConfig& config, std::uint64_t seed, bool materialize)
    : config_(config), params_(seed, materialize) {
  config_.validate();
  UperNetConfig uc;
  uc.channels = config_.decoder_channels;
  uc.num_classes = config_.num_classes;
  uc.aux_head = config_.aux_head;
  uc.aux_channels = config_.aux_channels;
  if (config_.backbone == BackboneKind::ViT) {
    vit_ = std::make_unique<VisionTransformer>(params_, "encoder", config_.vit);
    for (int i = 0; i < 4; ++i) {
      neck_norms_.push_back(make_layer_norm(params_, "neck.norm." + std::to_string(i), config_.vit.embed_dim));
    }
    uc.in_channels.fill(config_.vit.embed_dim);
  } else {
    dcn_ = std::make_unique<DcnBackbone>(params_, "backbone", config_.dcn);
    uc.in_channels = config_.dcn.channels;
  }
  head_ = std::make_unique<UperNetHead>(params_, "decode_head", uc);
}

std::int64_t count_parameters(const SegModelConfig& config) {
  return SegmentationModel(config, 0, false).parameters().count();
}

int SegmentationModel::size_multiple() const {
  if (config_.backbone == BackboneKind::DCN) return 32;
  const int p = config_.vit.patch_size;
  int m = 32;
  while (m % p != 0) m += 32;
  return m;
}

std::vector<Var> SegmentationModel::vit_levels(const Tensor& image, Rng* rng) const {
  const auto seq = vit_->patchify_embed(image);
  const auto taps_at = vit_tap_depths(config_.vit.depth);
  std::vector<Var> taps;
  vit_->encode(seq.tokens, taps_at, &taps, rng);
  if (taps.size() != 4) throw std::logic_error("SegmentationModel: expected four encoder taps");
  const auto h = image.dim(0), w = image.dim(1), d = config_.vit.embed_dim;
  std::vector<Var> levels;
  for (int i = 0; i < 4; ++i) {
    const auto stride = FeaturePyramid::strides[static_cast<std::size_t>(i)];
    const auto lh = h / stride, lw = w / stride;
    Var x = ops::reshape(neck_norms_[static_cast<std::size_t>(i)](taps[static_cast<std::size_t>(i)]), {seq.grid_h, seq.grid_w, d});
    if (lh > seq.grid_h || lw > seq.grid_w) x = ops::resize_bilinear(x, lh, lw);
    else if (lh < seq.grid_h || lw < seq.grid_w) x = ops::adaptive_avg_pool(x, lh, lw);
    levels.push_back(x);
  }
  return levels;
}

UperNetHead::Output SegmentationModel::forward(const Tensor& image, Rng* rng) const {
  if (image.rank() != 3 || image.dim(2) != 3) throw std::invalid_argument("SegmentationModel: expected [H, W, 3] image");
  const int m = size_multiple();
  if (image.dim(0) % m != 0 || image.dim(1) % m != 0) {
    throw std::invalid_argument("SegmentationModel: input " + std::to_string(image.dim(0)) + "x" +
                                std::to_string(image.dim(1)) + " is not a multiple of " + std::to_string(m));
  }
  std::vector<Var> levels;
  if (vit_) {
    levels = vit_levels(image, rng);
  } else {
    const auto pyr = dcn_->forward(Var(image));
    levels.assign(pyr.levels.begin(), pyr.levels.end());
  }
  return head_->forward(levels, image.dim(0), image.dim(1));
}

Tensor SegmentationModel::predict_logits(const Tensor& image) const {
  NoGradGuard guard;
  Image raw;
  raw.pixels = image;
  return forward(config_.normalization.apply(raw).pixels).logits.value();
}

Mask SegmentationModel::predict(const Tensor& image) const { return argmax_mask(predict_logits(image)); }

Var seg_loss(const Var& logits, const Mask& mask, const Var& aux, double aux_weight) {
  const auto& v = logits.value();
  if (v.rank() != 3 || v.dim(0) != mask.height || v.dim(1) != mask.width) {
    throw std::invalid_argument("seg_loss: logits " + shape_string(v.shape()) + " do not match mask " +
                                std::to_string(mask.height) + "x" + std::to_string(mask.width));
  }
  const auto c = v.dim(2);
  for (auto l : mask.labels) {
    if (l < 0 || l >= c) throw std::invalid_argument("seg_loss: mask value " + std::to_string(l) + " >= " + std::to_string(c) + " classes");
  }
  Var loss = ops::cross_entropy(logits, mask.labels);
  if (aux.defined() && aux_weight != 0.0) loss = ops::add(loss, ops::scale(ops::cross_entropy(aux, mask.labels), aux_weight));
  return loss;
}

Mask argmax_mask(const Tensor& logits) {
  if (logits.rank() != 3) throw std::invalid_argument("argmax_mask: expected [H, W, C]");
  Mask m;
  m.height = logits.dim(0);
  m.width = logits.dim(1);
  const auto c = logits.dim(2);
  m.labels.resize(static_cast<std::size_t>(m.height * m.width));
  for (std::int64_t p = 0; p < m.height * m.width; ++p) {
    const double* row = logits.data() + p * c;
    std::int64_t best = 0;
    for (std::int64_t k = 1; k < c; ++k)
      if (row[k] > row[best]) best = k;
    m.labels[static_cast<std::size_t>(p)] = static_cast<std::int32_t>(best);
  }
  return m;
}

}  // namespace segkit
