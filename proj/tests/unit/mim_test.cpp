#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "segkit/dataset.hpp"
#include "segkit/mim.hpp"
#include "segkit/training.hpp"
#include "test_util.hpp"

using namespace segkit;
using segkit::testing::random_tensor;

namespace {

MaskPlan plan_from(std::vector<std::uint8_t> flags) {
  MaskPlan p;
  p.count = std::accumulate(flags.begin(), flags.end(), std::int64_t{0});
  p.ratio = static_cast<double>(p.count) / static_cast<double>(flags.size());
  p.flags = std::move(flags);
  return p;
}

PatchSequence sequence(const Tensor& tokens, std::int64_t gh, std::int64_t gw) {
  PatchSequence s;
  s.tokens = Var(tokens);
  s.grid_h = gh;
  s.grid_w = gw;
  return s;
}

std::vector<Tensor> toy_images(std::uint64_t seed, int classes, int per_class) {
  const auto root = segkit::testing::temp_dir("mim_images_" + std::to_string(seed));
  return load_folder_images(generate_toy_image_folder(root, seed, classes, per_class, 32), 32);
}

}  // namespace

TEST(MaskSampling, ExactCountAt196) {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const auto p = sample_mask(196, 0.4, rng);
    ASSERT_EQ(p.count, 78);
    ASSERT_EQ(std::accumulate(p.flags.begin(), p.flags.end(), 0), 78);
  }
}

TEST(MaskSampling, ExtremeRatios) {
  Rng rng(2);
  const auto none = sample_mask(50, 0.0, rng);
  EXPECT_EQ(none.count, 0);
  EXPECT_EQ(std::accumulate(none.flags.begin(), none.flags.end(), 0), 0);
  const auto all = sample_mask(50, 1.0, rng);
  EXPECT_EQ(all.count, 50);
  EXPECT_EQ(std::accumulate(all.flags.begin(), all.flags.end(), 0), 50);
  EXPECT_THROW(sample_mask(50, 1.5, rng), std::invalid_argument);
  EXPECT_THROW(sample_mask(50, -0.1, rng), std::invalid_argument);
}

TEST(MaskSampling, DeterministicForSeed) {
  Rng a(3), b(3);
  for (int i = 0; i < 20; ++i) EXPECT_EQ(sample_mask(64, 0.4, a).flags, sample_mask(64, 0.4, b).flags);
}

TEST(MaskSampling, PositionFrequenciesWithinBinomialBounds) {
  Rng rng(2);
  const int draws = 10000;
  std::vector<int> hits(196, 0);
  for (int i = 0; i < draws; ++i) {
    const auto p = sample_mask(196, 0.4, rng);
    for (std::size_t j = 0; j < 196; ++j) hits[j] += p.flags[j];
  }
  const double q = 78.0 / 196.0;
  const double sigma = std::sqrt(draws * q * (1 - q));
  for (int h : hits) EXPECT_LT(std::abs(h - draws * q), 3.0 * sigma);
}

TEST(MaskSampling, PositionFrequenciesPassChiSquare) {
  for (std::uint64_t seed : {1, 3, 5}) {
    Rng rng(seed);
    const int draws = 10000;
    std::vector<int> hits(196, 0);
    for (int i = 0; i < draws; ++i) {
      const auto p = sample_mask(196, 0.4, rng);
      for (std::size_t j = 0; j < 196; ++j) hits[j] += p.flags[j];
    }
    const double q = 78.0 / 196.0, var = draws * q * (1 - q);
    double chi = 0.0;
    for (int h : hits) chi += (h - draws * q) * (h - draws * q) / var;
    // 195 degrees of freedom: mean 195, standard deviation about 19.7.
    EXPECT_LT(chi, 195.0 + 5.0 * 19.7) << seed;
  }
}

TEST(ApplyMask, EmptyPlanLeavesPatchesUnchanged) {
  const Tensor x = random_tensor({6, 4}, 5);
  const auto out = apply_mask(sequence(x, 2, 3), plan_from(std::vector<std::uint8_t>(6, 0)), Var(Tensor({4}, 9.0)));
  EXPECT_EQ(max_abs_diff(out.tokens.value(), x), 0.0);
}

TEST(ApplyMask, FullPlanMakesAllRowsTheMaskEmbedding) {
  const Tensor m = random_tensor({4}, 6);
  const auto out = apply_mask(sequence(random_tensor({6, 4}, 7), 2, 3), plan_from(std::vector<std::uint8_t>(6, 1)), Var(m));
  for (std::int64_t r = 0; r < 6; ++r)
    for (std::int64_t c = 0; c < 4; ++c) EXPECT_EQ(out.tokens.value().matrix()(r, c), m[static_cast<std::size_t>(c)]);
}

TEST(ApplyMask, LengthMismatchIsAnError) {
  EXPECT_THROW(apply_mask(sequence(random_tensor({6, 4}, 8), 2, 3), plan_from(std::vector<std::uint8_t>(5, 1)),
                          Var(Tensor({4}))),
               std::invalid_argument);
}

TEST(ApplyMask, OneMaskedPatchChangesOnlyThatRowOfEmbeddings) {
  const MimModel model(MimConfig::toy(), 9);
  const Tensor img = random_tensor({32, 32, 3}, 10);
  const auto seq = model.encoder().embed_patches(img);
  std::vector<std::uint8_t> flags(64, 0);
  flags[17] = 1;
  const auto masked = apply_mask(seq, plan_from(flags), Var(Tensor({64}, 0.0)));
  const Var a = model.encoder().add_positions(seq.tokens, 8, 8), b = model.encoder().add_positions(masked.tokens, 8, 8);
  for (std::int64_t r = 0; r < 64; ++r) {
    const double d = (a.value().matrix().row(r) - b.value().matrix().row(r)).norm();
    if (r == 17) {
      EXPECT_GT(d, 0.0);
      EXPECT_NEAR((b.value().matrix().row(r) - model.encoder().pos_embed.value().matrix().row(r)).norm(), 0.0, 1e-15);
    } else {
      EXPECT_EQ(d, 0.0);
    }
  }
}

TEST(MimLoss, UniformLogitsGiveLogVocab) {
  const auto plan = plan_from({1, 0, 1, 1, 0});
  const Var logits(Tensor({5, 8192}, 0.25));
  const std::vector<std::int32_t> targets{0, 5, 8191, 400, 7};
  EXPECT_NEAR(mim_loss(logits, targets, plan).value().item(), std::log(8192.0), 1e-12);
  EXPECT_NEAR(std::log(8192.0), 9.0109, 1e-3);
}

TEST(MimLoss, ConfidentCorrectLogitsGiveNearZero) {
  const auto plan = plan_from({1, 1, 0});
  Tensor l({3, 10}, 0.0);
  const std::vector<std::int32_t> targets{2, 7, 1};
  for (int r = 0; r < 3; ++r) l.matrix()(r, targets[static_cast<std::size_t>(r)]) = 1e4;
  EXPECT_LT(mim_loss(Var(l), targets, plan).value().item(), 1e-3);
}

TEST(MimLoss, UnmaskedLogitsDoNotMatter) {
  const auto plan = plan_from({1, 0, 1, 0});
  const Tensor l = random_tensor({4, 6}, 11);
  const std::vector<std::int32_t> targets{1, 2, 3, 4};
  Tensor l2 = l;
  l2.matrix()(1, 2) += 50.0;
  l2.matrix()(3, 0) -= 9.0;
  EXPECT_EQ(mim_loss(Var(l), targets, plan).value().item(), mim_loss(Var(l2), targets, plan).value().item());
}

TEST(MimLoss, GradientIsExactlyZeroAtUnmaskedRows) {
  const auto plan = plan_from({0, 1, 1, 0, 1});
  const Var l(random_tensor({5, 7}, 12), true);
  const std::vector<std::int32_t> targets{0, 1, 2, 3, 4};
  mim_loss(l, targets, plan).backward();
  for (std::int64_t r = 0; r < 5; ++r) {
    const double n = l.grad().matrix().row(r).norm();
    if (plan.flags[static_cast<std::size_t>(r)]) EXPECT_GT(n, 0.0);
    else EXPECT_EQ(n, 0.0);
  }
}

TEST(MimLoss, MatchesHandComputedMeanOverMaskedRows) {
  const auto plan = plan_from({1, 0, 1});
  const Tensor l = random_tensor({3, 4}, 13);
  const std::vector<std::int32_t> targets{3, 0, 1};
  double want = 0.0;
  for (int r : {0, 2}) {
    double z = 0.0;
    for (int k = 0; k < 4; ++k) z += std::exp(l.matrix()(r, k));
    want += std::log(z) - l.matrix()(r, targets[static_cast<std::size_t>(r)]);
  }
  EXPECT_NEAR(mim_loss(Var(l), targets, plan).value().item(), want / 2.0, 1e-12);
}

TEST(MimLoss, NoMaskedPositionsIsAnError) {
  EXPECT_THROW(mim_loss(Var(Tensor({2, 3})), std::vector<std::int32_t>{0, 1}, plan_from({0, 0})), std::invalid_argument);
}

TEST(Pretrain, ParameterNamesShareEncoderPrefix) {
  const MimModel model(MimConfig::toy(), 14);
  EXPECT_NE(model.parameters().find("encoder.pos_embed"), nullptr);
  EXPECT_NE(model.parameters().find("mask_embedding"), nullptr);
  const auto logits = model.forward(random_tensor({32, 32, 3}, 15), plan_from(std::vector<std::uint8_t>(64, 0)));
  EXPECT_EQ(logits.value().rows(), 64);
  EXPECT_EQ(logits.value().cols(), 64);
}

TEST(Pretrain, VocabularyMismatchIsAnError) {
  MimModel model(MimConfig::toy(), 16);
  AdamW opt(model.parameters(), {});
  Rng rng(17);
  const std::vector<Tensor> images{random_tensor({32, 32, 3}, 18)};
  EXPECT_THROW(pretrain_step(model, images, ConstantTargets(0, 32, 8), opt, 1e-3, rng), std::invalid_argument);
}

TEST(Pretrain, ConstantTargetsReachSanityFloor) {
  MimModel model(MimConfig::toy(), 19);
  const ConstantTargets targets(5, 64, 8);
  const auto images = toy_images(20, 2, 4);
  PretrainConfig cfg = PretrainConfig::toy();
  cfg.iterations = 200;
  cfg.optim.lr = 5e-3;
  const auto log = pretrain(model, targets, images, cfg);
  ASSERT_EQ(log.size(), 200u);
  double best = 1e9;
  for (const auto& r : log) best = std::min(best, r.loss);
  EXPECT_LT(best, 0.01);
}

TEST(Pretrain, TokenizerStaysFrozenAndLossHalves) {
  const auto images = toy_images(21, 4, 4);
  ASSERT_EQ(images.size(), 16u);
  TokenizerTrainConfig tcfg = TokenizerTrainConfig::toy();
  tcfg.iterations = 100;
  VqkdTokenizer tok(tcfg.model, tcfg.seed);
  const RandomViTTeacher teacher(tcfg.teacher, tcfg.teacher_seed);
  train_tokenizer(tok, teacher, images, tcfg);

  std::vector<Tensor> before;
  for (const auto& p : tok.parameters().items()) before.push_back(p.var.value());
  const Tensor codes_before = tok.codebook().codes;

  MimModel model(MimConfig::toy(), 22);
  const auto log = pretrain(model, TokenizerTargets(tok), images, PretrainConfig::toy());
  ASSERT_EQ(log.size(), 500u);
  std::vector<double> losses;
  for (const auto& r : log) losses.push_back(r.loss);
  const double start = running_mean(losses, 9);
  double best = start;
  for (std::size_t e = 10; e < losses.size(); ++e) best = std::min(best, running_mean(losses, e));
  EXPECT_LE(best, 0.5 * start);

  for (std::size_t i = 0; i < before.size(); ++i)
    EXPECT_EQ(max_abs_diff(before[i], tok.parameters().items()[i].var.value()), 0.0) << tok.parameters().items()[i].name;
  EXPECT_EQ(max_abs_diff(codes_before, tok.codebook().codes), 0.0);
}
