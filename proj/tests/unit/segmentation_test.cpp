#include <gtest/gtest.h>

#include <cmath>

#include "segkit/segmentation.hpp"
#include "segkit/optim.hpp"
#include "test_util.hpp"

using namespace segkit;
using segkit::testing::random_tensor;

namespace {

std::vector<ImageSample> toy_samples(int n) {
  const auto root = segkit::testing::temp_dir("seg_toy");
  ToyDatasetOptions o;
  o.n_images = n;
  const auto m = generate_toy_dataset(root, o);
  std::vector<ImageSample> out;
  for (std::size_t i = 0; i < m.size(); ++i) out.push_back(m.load(i));
  return out;
}

Tensor random_image(std::int64_t size, std::uint64_t seed) {
  Tensor t = random_tensor({size, size, 3}, seed, 0.2);
  for (auto& v : t.values()) v = std::clamp(v + 0.5, 0.0, 1.0);
  return t;
}

std::vector<double> fixed_batch_losses(BackboneKind kind, int steps) {
  SegmentationModel model(SegModelConfig::toy(kind, 5), 1);
  const auto samples = toy_samples(2);
  AdamW opt(model.parameters(), {kind == BackboneKind::DCN ? 2e-3 : 1e-3, 0.0, 0.9, 0.999, 1e-8});
  std::vector<double> losses;
  for (int t = 0; t < steps; ++t) {
    model.parameters().zero_grad();
    double total = 0.0;
    for (const auto& s : samples) {
      const auto out = model.forward(model.config().normalization.apply(s.image).pixels);
      const Var loss = ops::scale(seg_loss(out.logits, s.mask, out.aux), 0.5);
      total += loss.value().item();
      loss.backward();
    }
    losses.push_back(total);
    opt.step();
  }
  return losses;
}

}  // namespace

TEST(Segmentation, ToyLogitsMatchInputResolution) {
  for (auto kind : {BackboneKind::ViT, BackboneKind::DCN}) {
    const SegmentationModel model(SegModelConfig::toy(kind, 5), 2);
    const auto logits = model.predict_logits(random_image(64, 3));
    EXPECT_EQ(logits.shape(), (Shape{64, 64, 5})) << backbone_name(kind);
    const auto mask = model.predict(random_image(64, 4));
    for (auto v : mask.labels) {
      EXPECT_GE(v, 0);
      EXPECT_LT(v, 5);
    }
  }
}

TEST(Segmentation, FoodSegClassCountAt512) {
  const SegmentationModel model(SegModelConfig::toy(BackboneKind::DCN, 104), 5);
  EXPECT_EQ(model.predict_logits(random_image(512, 6)).shape(), (Shape{512, 512, 104}));
}

TEST(Segmentation, IndivisibleInputIsAnError) {
  const SegmentationModel model(SegModelConfig::toy(BackboneKind::DCN, 5), 7);
  EXPECT_EQ(model.size_multiple(), 32);
  EXPECT_THROW(model.predict_logits(random_image(48, 8)), std::invalid_argument);
}

TEST(Segmentation, ParameterPrefixes) {
  const SegmentationModel vit(SegModelConfig::toy(BackboneKind::ViT, 5), 9);
  EXPECT_NE(vit.parameters().find("encoder.pos_embed"), nullptr);
  EXPECT_NE(vit.parameters().find("neck.norm.0.weight"), nullptr);
  const SegmentationModel dcn(SegModelConfig::toy(BackboneKind::DCN, 5), 9);
  EXPECT_NE(dcn.parameters().find("backbone.stem.conv1.weight"), nullptr);
  EXPECT_NE(dcn.parameters().find("decode_head.classifier.weight"), nullptr);
}

TEST(SegLoss, UniformLogitsGiveLogClasses) {
  const Mask m(4, 4, 3);
  EXPECT_NEAR(seg_loss(Var(Tensor({4, 4, 5}, 0.7)), m).value().item(), std::log(5.0), 1e-12);
}

TEST(SegLoss, PerfectLogitsGiveNearZero) {
  Mask m(3, 3, 0);
  Tensor l({3, 3, 5}, 0.0);
  for (std::int64_t p = 0; p < 9; ++p) {
    m.labels[static_cast<std::size_t>(p)] = static_cast<std::int32_t>(p % 5);
    l[static_cast<std::size_t>(p * 5 + p % 5)] = 1e4;
  }
  EXPECT_LT(seg_loss(Var(l), m).value().item(), 1e-3);
  EXPECT_EQ(argmax_mask(l), m);
}

TEST(SegLoss, AuxiliaryWeighting) {
  const Mask m(2, 2, 1);
  const Tensor l = random_tensor({2, 2, 3}, 10), a = random_tensor({2, 2, 3}, 11);
  const double primary = seg_loss(Var(l), m).value().item();
  const double aux = seg_loss(Var(a), m).value().item();
  EXPECT_EQ(seg_loss(Var(l), m, Var(a), 0.0).value().item(), primary);
  EXPECT_NEAR(seg_loss(Var(l), m, Var(a), 0.4).value().item(), primary + 0.4 * aux, 1e-14);
}

TEST(SegLoss, OutOfRangeLabelIsAnError) {
  EXPECT_THROW(seg_loss(Var(Tensor({2, 2, 3})), Mask(2, 2, 3)), std::invalid_argument);
  EXPECT_THROW(seg_loss(Var(Tensor({2, 3, 3})), Mask(2, 2, 0)), std::invalid_argument);
}

TEST(ArgmaxMask, TiesTakeLowestClass) {
  EXPECT_EQ(argmax_mask(Tensor({1, 1, 3}, {0.5, 0.5, 0.1})).labels[0], 0);
}

TEST(Segmentation, FixedBatchLossDecreasesForTwentySteps) {
  for (auto kind : {BackboneKind::ViT, BackboneKind::DCN}) {
    const auto losses = fixed_batch_losses(kind, 21);
    for (std::size_t t = 1; t < losses.size(); ++t)
      EXPECT_LT(losses[t], losses[t - 1]) << backbone_name(kind) << " step " << t;
  }
}
