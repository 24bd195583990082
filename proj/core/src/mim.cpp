#include "segkit/mim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace segkit {

MaskPlan sample_mask(std::int64_t n_patches, double ratio, Rng& rng) {
  if (n_patches < 0) throw std::invalid_argument("sample_mask: negative patch count");
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw std::invalid_argument("sample_mask: ratio must lie in [0, 1]");
  MaskPlan plan;
  plan.ratio = ratio;
  plan.count = static_cast<std::int64_t>(std::floor(ratio * static_cast<double>(n_patches)));
  plan.flags.assign(static_cast<std::size_t>(n_patches), 0);
  // Partial Fisher-Yates: the first `count` entries are a uniform subset.
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n_patches));
  std::iota(idx.begin(), idx.end(), 0);
  for (std::int64_t i = 0; i < plan.count; ++i) {
    std::uniform_int_distribution<std::int64_t> pick(i, n_patches - 1);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
    plan.flags[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])] = 1;
  }
  return plan;
}

PatchSequence apply_mask(const PatchSequence& patches, const MaskPlan& plan, const Var& mask_embedding) {
  if (plan.size() != patches.size() || patches.tokens.value().rows() != patches.size()) {
    throw std::invalid_argument("apply_mask: plan has " + std::to_string(plan.size()) + " flags for " +
                                std::to_string(patches.size()) + " patches");
  }
  PatchSequence out = patches;
  out.mask = plan.flags;
  if (plan.count > 0) out.tokens = ops::mask_rows(patches.tokens, plan.flags, mask_embedding);
  return out;
}

Var mim_loss(const Var& logits, std::span<const std::int32_t> targets, const MaskPlan& plan) {
  if (plan.count == 0) throw std::invalid_argument("mim_loss: no masked positions");
  if (static_cast<std::int64_t>(targets.size()) != plan.size() || logits.value().rows() != plan.size()) {
    throw std::invalid_argument("mim_loss: logits, targets and plan lengths differ");
  }
  return ops::cross_entropy(logits, targets, plan.flags);
}

TokenSequence ConstantTargets::targets(const Tensor&) const {
  TokenSequence t;
  t.grid_h = t.grid_w = grid_;
  t.codes.assign(static_cast<std::size_t>(grid_) * static_cast<std::size_t>(grid_), code_);
  return t;
}

void MimConfig::validate() const {
  encoder.validate();
  if (vocab_size <= 0) throw std::invalid_argument("MimConfig: vocab_size must be positive");
  if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0)) throw std::invalid_argument("MimConfig: mask_ratio must lie in [0, 1]");
}

MimConfig MimConfig::toy() {
  MimConfig c;
  c.encoder = ViTConfig::toy();
  c.encoder.image_size = 32;
  c.vocab_size = 64;
  return c;
}

MimConfig MimConfig::large() {
  MimConfig c;
  c.encoder = ViTConfig::large();
  return c;
}

MimModel::MimModel(const MimConfig& config, std::uint64_t seed)
    : config_(config), params_(seed), encoder_(params_, "encoder", config.encoder) {
  config_.validate();
  mask_embedding_ = params_.add("mask_embedding", {config_.encoder.embed_dim}, Init::trunc_normal(0.02), false);
  head_ = make_linear(params_, "head", config_.encoder.embed_dim, config_.vocab_size, Init::trunc_normal(0.02));
}

Var MimModel::forward(const Tensor& image, const MaskPlan& plan) const {
  Tensor x = image;
  for (auto& v : x.values()) v = (v - 0.5) / 0.25;
  PatchSequence seq = apply_mask(encoder_.embed_patches(x), plan, mask_embedding_);
  const Var tokens = encoder_.add_positions(seq.tokens, seq.grid_h, seq.grid_w);
  return head_(encoder_.encode(tokens));
}

Var MimModel::loss(const Tensor& image, std::span<const std::int32_t> targets, const MaskPlan& plan) const {
  return mim_loss(forward(image, plan), targets, plan);
}

double pretrain_step(MimModel& model, std::span<const Tensor> images, const TokenTargetSource& targets,
                     AdamW& optimizer, double lr, Rng& rng) {
  if (images.empty()) throw std::invalid_argument("pretrain_step: empty batch");
  if (targets.vocab_size() != model.config().vocab_size) {
    throw std::invalid_argument("pretrain_step: target vocabulary " + std::to_string(targets.vocab_size()) +
                                " does not match head size " + std::to_string(model.config().vocab_size));
  }
  model.parameters().zero_grad();
  const double inv = 1.0 / static_cast<double>(images.size());
  const auto n = static_cast<std::int64_t>(model.config().encoder.grid()) * model.config().encoder.grid();
  double total = 0.0;
  for (const auto& img : images) {
    const TokenSequence t = targets.targets(img);
    if (static_cast<std::int64_t>(t.codes.size()) != n) {
      throw std::invalid_argument("pretrain_step: target grid does not match encoder grid");
    }
    const MaskPlan plan = sample_mask(n, model.config().mask_ratio, rng);
    const Var loss = model.loss(img, t.codes, plan);
    const double v = loss.value().item();
    if (!std::isfinite(v)) throw std::runtime_error("pretrain_step: non-finite loss");
    ops::scale(loss, inv).backward();
    total += v * inv;
  }
  optimizer.step(lr);
  return total;
}

}  // namespace segkit
