#include <gtest/gtest.h>

#include <cmath>

#include "segkit/dcn.hpp"
#include "segkit/segmentation.hpp"
#include "test_util.hpp"

using namespace segkit;
using segkit::testing::grad_check;
using segkit::testing::random_tensor;

namespace {

double& at3(Tensor& t, std::int64_t y, std::int64_t x, std::int64_t c) {
  return t[static_cast<std::size_t>((y * t.dim(1) + x) * t.dim(2) + c)];
}
double at3(const Tensor& t, std::int64_t y, std::int64_t x, std::int64_t c) {
  return t[static_cast<std::size_t>((y * t.dim(1) + x) * t.dim(2) + c)];
}

void randomize(ParameterSet& ps, std::uint64_t seed, double scale, const std::string& skip = "") {
  for (auto& p : ps.items()) {
    if (!skip.empty() && p.name.find(skip) != std::string::npos) continue;
    p.var.mutable_value() = random_tensor(p.shape, seed++, scale);
  }
}

/// Block-diagonal projection, zero-padded 3x3 box average, then dense output projection.
Tensor dense_reference(const Tensor& x, const DcnV3Weights& w) {
  const auto h = x.dim(0), wd = x.dim(1), c = x.dim(2);
  const std::int64_t g = w.groups, cg = c / g;
  const Tensor& wi = w.input_weight.value();
  Tensor proj({h, wd, c});
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t xx = 0; xx < wd; ++xx)
      for (std::int64_t gi = 0; gi < g; ++gi)
        for (std::int64_t o = 0; o < cg; ++o) {
          double s = w.input_bias.value()[static_cast<std::size_t>(gi * cg + o)];
          for (std::int64_t i = 0; i < cg; ++i)
            s += at3(x, y, xx, gi * cg + i) * wi[static_cast<std::size_t>((gi * cg + i) * cg + o)];
          at3(proj, y, xx, gi * cg + o) = s;
        }
  Tensor box({h, wd, c});
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t xx = 0; xx < wd; ++xx)
      for (std::int64_t ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const auto yy = y + dy, xs = xx + dx;
            if (yy >= 0 && yy < h && xs >= 0 && xs < wd) s += at3(proj, yy, xs, ch);
          }
        at3(box, y, xx, ch) = s / 9.0;
      }
  Tensor out({h, wd, c});
  const Tensor& wo = w.output.weight.value();
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t xx = 0; xx < wd; ++xx)
      for (std::int64_t o = 0; o < c; ++o) {
        double s = w.output.bias.value()[static_cast<std::size_t>(o)];
        for (std::int64_t i = 0; i < c; ++i) s += at3(box, y, xx, i) * wo[static_cast<std::size_t>(i * c + o)];
        at3(out, y, xx, o) = s;
      }
  return out;
}

/// Offsets whose sample positions stay away from integer coordinates.
Tensor off_lattice_offsets(const Shape& shape, std::uint64_t seed) {
  Tensor t = random_tensor(shape, seed, 0.15);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] += (i % 2 ? 0.37 : -0.41);
  return t;
}

}  // namespace

TEST(BilinearSample, LatticePointsMidpointsAndOutside) {
  const Tensor f({2, 2, 1}, {1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(bilinear_sample(f, 0.0, 1.0)[0], 2.0);
  EXPECT_DOUBLE_EQ(bilinear_sample(f, 1.0, 0.0)[0], 3.0);
  EXPECT_DOUBLE_EQ(bilinear_sample(f, 0.5, 0.5)[0], 2.5);
  EXPECT_DOUBLE_EQ(bilinear_sample(f, 0.0, 0.25)[0], 1.25);
  EXPECT_DOUBLE_EQ(bilinear_sample(f, -5.0, 0.0)[0], 0.0);
  EXPECT_DOUBLE_EQ(bilinear_sample(f, 0.0, 1.5)[0], 1.0);  // half weight on a zero corner
}

TEST(DcnV3, ZeroOffsetsEqualModulationMatchDenseOracle) {
  for (std::uint64_t seed : {1, 2, 3}) {
    ParameterSet ps(seed);
    const auto w = make_dcn_v3(ps, "dcn", 8, 2);
    randomize(ps, 100 * seed, 0.5, ".offset");
    // Offset and modulation heads stay zero: offsets 0, equal modulation logits.
    for (auto& p : ps.items())
      if (p.name.find(".offset.") != std::string::npos || p.name.find(".mask.") != std::string::npos)
        p.var.mutable_value().fill(0.0);
    const Tensor x = random_tensor({6, 6, 8}, seed + 10);
    const auto got = dcn_v3(Var(x), w).value();
    EXPECT_LT(max_abs_diff(got, dense_reference(x, w)), 1e-5);
  }
}

TEST(DcnV3, SinglePixelMapUsesOnlyCenterPoint) {
  const Tensor v = random_tensor({1, 1, 4}, 5);
  const Tensor mod({1, 1, 9}, 1.0 / 9.0);
  const auto out = ops::dcn_sample(Var(v), Var(Tensor({1, 1, 18}, 0.0)), Var(mod), 1).value();
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(out[c], v[c] / 9.0, 1e-15);
}

TEST(DcnV3, SamplingMatchesBilinearOracle) {
  const int g = 2;
  const Tensor v = random_tensor({5, 4, 6}, 6);
  const Tensor off = off_lattice_offsets({5, 4, g * 18}, 7);
  const Tensor mod = random_tensor({5, 4, g * 9}, 8);
  const auto out = ops::dcn_sample(Var(v), Var(off), Var(mod), g).value();
  for (std::int64_t y = 0; y < 5; ++y)
    for (std::int64_t x = 0; x < 4; ++x)
      for (int gi = 0; gi < g; ++gi) {
        std::vector<double> want(3, 0.0);
        for (int k = 0; k < 9; ++k) {
          const double py = static_cast<double>(y + k / 3 - 1) + at3(off, y, x, (gi * 9 + k) * 2);
          const double px = static_cast<double>(x + k % 3 - 1) + at3(off, y, x, (gi * 9 + k) * 2 + 1);
          const auto s = bilinear_sample(v, py, px);
          for (int c = 0; c < 3; ++c) want[static_cast<std::size_t>(c)] += at3(mod, y, x, gi * 9 + k) * s[static_cast<std::size_t>(gi * 3 + c)];
        }
        for (int c = 0; c < 3; ++c) EXPECT_NEAR(at3(out, y, x, gi * 3 + c), want[static_cast<std::size_t>(c)], 1e-12);
      }
}

TEST(DcnV3, ModulationSumsToOnePerGroup) {
  ParameterSet ps(9);
  const auto w = make_dcn_v3(ps, "dcn", 8, 4);
  randomize(ps, 900, 0.5);
  const auto s = dcn_v3_sampling(Var(random_tensor({5, 5, 8}, 10)), w);
  const auto& m = s.modulation.value();
  for (std::int64_t y = 0; y < 5; ++y)
    for (std::int64_t x = 0; x < 5; ++x)
      for (int gi = 0; gi < 4; ++gi) {
        double sum = 0.0;
        for (int k = 0; k < 9; ++k) sum += at3(m, y, x, gi * 9 + k);
        EXPECT_NEAR(sum, 1.0, 1e-12);
      }
}

TEST(DcnV3, OffsetBoundClampsOffsets) {
  ParameterSet ps(11);
  const auto w = make_dcn_v3(ps, "dcn", 4, 1, 0.5);
  randomize(ps, 1100, 3.0);
  const auto s = dcn_v3_sampling(Var(random_tensor({4, 4, 4}, 12)), w);
  for (auto v : s.offsets.value().values()) EXPECT_LE(std::abs(v), 0.5);
}

TEST(DcnV3, SampleGradientsMatchFiniteDifferences) {
  const auto r = grad_check(
      [](const std::vector<Var>& v) { return ops::dcn_sample(v[0], v[1], v[2], 2); },
      {random_tensor({4, 5, 4}, 13), off_lattice_offsets({4, 5, 36}, 14), random_tensor({4, 5, 18}, 15)});
  EXPECT_LT(r.per_input[0], 1e-6);
  EXPECT_LT(r.per_input[1], 1e-6);
  EXPECT_LT(r.per_input[2], 1e-6);
}

TEST(DcnV3, OperatorGradientsMatchFiniteDifferences) {
  ParameterSet ps(16);
  const auto w = make_dcn_v3(ps, "dcn", 4, 2);
  randomize(ps, 1600, 0.3);
  const auto r = grad_check(
      [&](const std::vector<Var>& v) {
        DcnV3Weights ww = w;
        ww.input_weight = v[1];
        ww.offset.weight = v[2];
        ww.modulation.weight = v[3];
        ww.output.weight = v[4];
        return dcn_v3(v[0], ww);
      },
      {random_tensor({4, 4, 4}, 17), w.input_weight.value(), w.offset.weight.value(), w.modulation.weight.value(),
       w.output.weight.value()});
  for (double e : r.per_input) EXPECT_LT(e, 1e-3);
}

TEST(DcnBlock, ZeroBranchWeightsGiveIdentity) {
  ParameterSet ps(18);
  const auto b = make_dcn_block(ps, "block", 8, 2, 4.0);
  randomize(ps, 1800, 0.3);
  for (auto& p : ps.items())
    if (p.name.find("output_proj") != std::string::npos || p.name.find("mlp.fc2") != std::string::npos)
      p.var.mutable_value().fill(0.0);
  const Tensor x = random_tensor({5, 5, 8}, 19);
  EXPECT_EQ(max_abs_diff(basic_block(Var(x), b).value(), x), 0.0);
}

TEST(DcnBackbone, PyramidShapesAtToyAndFullResolution) {
  ParameterSet ps(20);
  const DcnBackbone bb(ps, "backbone", DCNConfig::toy());
  NoGradGuard g;
  const auto p = bb.forward(Var(random_tensor({64, 64, 3}, 21)));
  const std::array<std::int64_t, 4> sides{16, 8, 4, 2};
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(p.levels[i].value().dim(0), sides[i]);
    EXPECT_EQ(p.levels[i].value().dim(1), sides[i]);
    EXPECT_EQ(p.levels[i].value().dim(2), DCNConfig::toy().channels[i]);
  }
  const auto big = bb.forward(Var(random_tensor({512, 512, 3}, 22)));
  for (int i = 0; i < 4; ++i) EXPECT_EQ(big.levels[i].value().dim(0), 512 / FeaturePyramid::strides[i]);
  EXPECT_THROW(bb.forward(Var(random_tensor({48, 64, 3}, 23))), std::invalid_argument);
}

TEST(DcnBackbone, DeterministicForSeed) {
  ParameterSet a(24), b(24);
  const DcnBackbone ba(a, "backbone", DCNConfig::toy()), bb(b, "backbone", DCNConfig::toy());
  const Tensor x = random_tensor({32, 32, 3}, 25);
  NoGradGuard g;
  const auto pa = ba.forward(Var(x)), pb = bb.forward(Var(x));
  for (int i = 0; i < 4; ++i) EXPECT_EQ(max_abs_diff(pa.levels[i].value(), pb.levels[i].value()), 0.0);
}

TEST(DcnBackbone, BasePresetIsNear128MParameters) {
  const auto n = count_parameters(SegModelConfig::at_scale(BackboneKind::DCN, 104));
  EXPECT_GT(n, 115'200'000);
  EXPECT_LT(n, 140'800'000);
}
