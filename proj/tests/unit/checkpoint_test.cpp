#include <gtest/gtest.h>

#include <fstream>

#include "segkit/checkpoint.hpp"
#include "segkit/training.hpp"
#include "test_util.hpp"

using namespace segkit;
using segkit::testing::random_tensor;

TEST(Archive, RoundTripIsBitExact) {
  const auto dir = segkit::testing::temp_dir("ckpt_roundtrip");
  Archive a;
  a.meta = R"({"kind":"test","step":7})";
  a.arrays["x.weight"] = random_tensor({3, 4}, 1);
  a.arrays["y"] = random_tensor({5}, 2);
  save_archive(dir / "a.ckpt", a);
  const auto b = load_archive(dir / "a.ckpt");
  EXPECT_EQ(b.meta, a.meta);
  ASSERT_EQ(b.arrays.size(), 2u);
  for (const auto& [k, v] : a.arrays) {
    EXPECT_EQ(b.arrays.at(k).shape(), v.shape());
    EXPECT_EQ(max_abs_diff(b.arrays.at(k), v), 0.0);
  }
}

TEST(Archive, CorruptFilesAreErrors) {
  const auto dir = segkit::testing::temp_dir("ckpt_corrupt");
  std::ofstream(dir / "bad.ckpt") << "NOTACKPT";
  EXPECT_THROW(load_archive(dir / "bad.ckpt"), std::runtime_error);
  EXPECT_THROW(load_archive(dir / "missing.ckpt"), std::runtime_error);
}

TEST(LoadParameters, PrefixRemapAndMissingReport) {
  ParameterSet src(1);
  src.add("encoder.a", {2, 2}, Init::trunc_normal(1.0));
  src.add("encoder.b", {3}, Init::trunc_normal(1.0));
  Archive ar;
  store_parameters(ar, src);
  ParameterSet dst(2);
  Var a = dst.add("backbone.a", {2, 2}, Init::zeros());
  dst.add("backbone.c", {1}, Init::zeros());
  const auto rep = load_parameters(dst, ar, "encoder.", "backbone.");
  EXPECT_EQ(rep.loaded, (std::vector<std::string>{"backbone.a"}));
  EXPECT_EQ(rep.missing, (std::vector<std::string>{"backbone.c"}));
  EXPECT_EQ(max_abs_diff(a.value(), src.items()[0].var.value()), 0.0);
  EXPECT_THROW(load_parameters(dst, ar, "encoder.", "backbone.", true), std::invalid_argument);
}

TEST(LoadParameters, ShapeMismatchIsAnError) {
  ParameterSet src(3);
  src.add("w", {2, 3}, Init::zeros());
  Archive ar;
  store_parameters(ar, src);
  ParameterSet dst(4);
  dst.add("w", {3, 2}, Init::zeros());
  EXPECT_THROW(load_parameters(dst, ar), std::invalid_argument);
}

TEST(LoadParameters, PositionTableIsResizedForNewGrid) {
  Archive ar;
  ar.arrays["encoder.pos_embed"] = Tensor({14 * 14, 4}, 0.3);
  ParameterSet dst(5);
  Var p = dst.add("encoder.pos_embed", {32 * 32, 4}, Init::zeros(), false);
  const auto rep = load_parameters(dst, ar);
  EXPECT_EQ(rep.interpolated, (std::vector<std::string>{"encoder.pos_embed"}));
  for (auto v : p.value().values()) EXPECT_NEAR(v, 0.3, 1e-12);
}

TEST(ModelCheckpoint, SegmentationModelRoundTripPredictsIdentically) {
  const auto dir = segkit::testing::temp_dir("ckpt_seg");
  for (auto kind : {BackboneKind::ViT, BackboneKind::DCN}) {
    const SegmentationModel model(SegModelConfig::toy(kind, 5), 6);
    save_segmentation_model(dir / "m.ckpt", model);
    const auto back = load_segmentation_model(dir / "m.ckpt");
    EXPECT_EQ(back->config().backbone, kind);
    const Tensor img = random_tensor({64, 64, 3}, 7, 0.1);
    EXPECT_EQ(max_abs_diff(model.predict_logits(img), back->predict_logits(img)), 0.0);
  }
}

TEST(ModelCheckpoint, TokenizerRoundTripKeepsCodes) {
  const auto dir = segkit::testing::temp_dir("ckpt_tok");
  VqkdTokenizer tok(TokenizerConfig::toy(), 8);
  tok.codebook().idle[3] = 17;
  save_tokenizer(dir / "t.ckpt", tok);
  const auto back = load_tokenizer(dir / "t.ckpt");
  EXPECT_EQ(max_abs_diff(back->codebook().codes, tok.codebook().codes), 0.0);
  EXPECT_EQ(back->codebook().idle[3], 17);
  Tensor img = random_tensor({32, 32, 3}, 9, 0.2);
  for (auto& v : img.values()) v += 0.5;
  EXPECT_EQ(back->tokenize(img).codes, tok.tokenize(img).codes);
}

TEST(ModelCheckpoint, PretrainedEncoderLoadsIntoSegmentationModel) {
  const auto dir = segkit::testing::temp_dir("ckpt_mim");
  const MimModel mim(MimConfig::toy(), 10);
  save_mim_model(dir / "mim.ckpt", mim);
  SegmentationModel seg(SegModelConfig::toy(BackboneKind::ViT, 5), 11);
  const auto rep = load_parameters(seg.parameters(), load_archive(dir / "mim.ckpt"), "encoder.", "encoder.");
  EXPECT_EQ(rep.interpolated, (std::vector<std::string>{"encoder.pos_embed"}));
  const auto* src = mim.parameters().find("encoder.blocks.0.attn.qkv.weight");
  const auto* dst = seg.parameters().find("encoder.blocks.0.attn.qkv.weight");
  EXPECT_EQ(max_abs_diff(src->var.value(), dst->var.value()), 0.0);
}
