#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "segkit/optim.hpp"
#include "segkit/vit.hpp"
#include "segkit/vqkd.hpp"

namespace segkit {

/// Which patches of an N-patch grid are hidden.
struct MaskPlan {
  std::vector<std::uint8_t> flags;
  double ratio = 0.0;
  std::int64_t count = 0;

  std::int64_t size() const { return static_cast<std::int64_t>(flags.size()); }
};

/// Exactly floor(ratio * n) positions drawn uniformly without replacement.
MaskPlan sample_mask(std::int64_t n_patches, double ratio, Rng& rng);

/// Replaces masked token rows with `mask_embedding` [D]. Expects embeddings
/// before position embeddings are added.
PatchSequence apply_mask(const PatchSequence& patches, const MaskPlan& plan, const Var& mask_embedding);

/// Mean cross-entropy of logits [N, K] over masked positions only.
Var mim_loss(const Var& logits, std::span<const std::int32_t> targets, const MaskPlan& plan);

/// Supplies per-patch code targets for an image.
class TokenTargetSource {
 public:
  virtual ~TokenTargetSource() = default;
  virtual TokenSequence targets(const Tensor& image) const = 0;
  virtual std::int64_t vocab_size() const = 0;
};

/// Targets from a frozen tokenizer, which is only read.
class TokenizerTargets final : public TokenTargetSource {
 public:
  explicit TokenizerTargets(const VqkdTokenizer& tokenizer) : tokenizer_(&tokenizer) {}
  TokenSequence targets(const Tensor& image) const override { return tokenizer_->tokenize(image); }
  std::int64_t vocab_size() const override { return tokenizer_->codebook().size(); }

 private:
  const VqkdTokenizer* tokenizer_;
};

/// The same code at every patch.
class ConstantTargets final : public TokenTargetSource {
 public:
  ConstantTargets(std::int32_t code, std::int64_t vocab, int grid) : code_(code), vocab_(vocab), grid_(grid) {}
  TokenSequence targets(const Tensor& image) const override;
  std::int64_t vocab_size() const override { return vocab_; }

 private:
  std::int32_t code_;
  std::int64_t vocab_;
  int grid_;
};

struct MimConfig {
  ViTConfig encoder;
  std::int64_t vocab_size = 8192;
  double mask_ratio = 0.4;

  void validate() const;
  /// 32x32 inputs with 4-pixel patches, matching the toy tokenizer grid.
  static MimConfig toy();
  /// ViT-L/16 at 224x224, 40% masking, K=8192.
  static MimConfig large();
};

/// ViT encoder with a learnable mask embedding and a linear head to code logits.
/// Encoder parameters are named `encoder.*` so they load into a segmentation model.
class MimModel {
 public:
  MimModel(const MimConfig& config, std::uint64_t seed);

  const MimConfig& config() const { return config_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }
  const VisionTransformer& encoder() const { return encoder_; }

  /// Code logits [N, K] for an image with the masked patches replaced.
  Var forward(const Tensor& image, const MaskPlan& plan) const;
  Var loss(const Tensor& image, std::span<const std::int32_t> targets, const MaskPlan& plan) const;

 private:
  MimConfig config_;
  ParameterSet params_;
  VisionTransformer encoder_;
  Var mask_embedding_;
  Linear head_;
};

/// One step: targets per image, fresh mask per image, mean loss, backward, AdamW.
/// Returns the loss before the update.
double pretrain_step(MimModel& model, std::span<const Tensor> images, const TokenTargetSource& targets,
                     AdamW& optimizer, double lr, Rng& rng);

}  // namespace segkit
