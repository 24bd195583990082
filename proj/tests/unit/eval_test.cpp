#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "segkit/eval.hpp"
#include "segkit/render.hpp"
#include "test_util.hpp"

using namespace segkit;
using segkit::testing::random_tensor;

namespace {

Mask random_mask(std::int64_t h, std::int64_t w, int classes, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<int> d(0, classes - 1);
  Mask m(h, w);
  for (auto& v : m.labels) v = d(rng);
  return m;
}

/// Position-dependent per-window output so that overlapping windows disagree.
Tensor window_fn(const Tensor& crop) {
  const auto h = crop.dim(0), w = crop.dim(1);
  Tensor out({h, w, 2});
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const double v = crop[static_cast<std::size_t>((y * w + x) * 3)];
      out[static_cast<std::size_t>((y * w + x) * 2)] = v * (1.0 + 0.01 * static_cast<double>(y)) + 0.001 * static_cast<double>(x);
      out[static_cast<std::size_t>((y * w + x) * 2 + 1)] = std::sin(static_cast<double>(x + 3 * y)) * v;
    }
  return out;
}

}  // namespace

TEST(Confusion, UpdateCountsGroundTruthRowsAndPredictionColumns) {
  ConfusionMatrix m(4);
  Mask gt(1, 1, 2), pred(1, 1, 3);
  confusion_update(m, pred, gt);
  EXPECT_EQ(m.at(2, 3), 1);
  EXPECT_EQ(m.total(), 1);
  const auto g = random_mask(5, 7, 4, 1);
  ConfusionMatrix d(4);
  confusion_update(d, g, g);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      if (i != j) EXPECT_EQ(d.at(i, j), 0);
  EXPECT_EQ(d.total(), 35);
  EXPECT_THROW(confusion_update(d, Mask(5, 6), g), std::invalid_argument);
}

TEST(Miou, HandCaseIsPointSix) {
  ConfusionMatrix m(2);
  m.at(0, 0) = 3;
  m.at(0, 1) = 1;
  m.at(1, 0) = 1;
  m.at(1, 1) = 3;
  const auto r = miou(m);
  EXPECT_EQ(r.iou[0], 0.6);
  EXPECT_EQ(r.iou[1], 0.6);
  EXPECT_EQ(r.miou, 0.6);
}

TEST(Miou, PerfectPredictionsGiveOne) {
  ConfusionMatrix m(6);
  for (int s = 0; s < 5; ++s) {
    const auto g = random_mask(8, 8, 6, 10 + static_cast<std::uint64_t>(s));
    confusion_update(m, g, g);
  }
  EXPECT_EQ(miou(m).miou, 1.0);
}

TEST(Miou, AbsentClassesAreExcluded) {
  ConfusionMatrix m(3);
  m.at(0, 0) = 2;
  m.at(1, 1) = 1;
  m.at(1, 0) = 1;
  const auto r = miou(m);
  EXPECT_TRUE(std::isnan(r.iou[2]));
  EXPECT_DOUBLE_EQ(r.miou, (2.0 / 3.0 + 0.5) / 2.0);
  EXPECT_DOUBLE_EQ(r.miou_without_background, 0.5);
  const auto nb = miou(m, true);
  EXPECT_DOUBLE_EQ(nb.miou, 0.5);
  EXPECT_THROW(miou(ConfusionMatrix(3)), std::invalid_argument);
}

TEST(Miou, RelabelingInvariance) {
  const int c = 6;
  Rng rng(20);
  for (int trial = 0; trial < 100; ++trial) {
    const auto gt = random_mask(6, 6, c, 100 + static_cast<std::uint64_t>(trial));
    auto pred = gt;
    std::uniform_int_distribution<int> d(0, c - 1);
    for (auto& v : pred.labels)
      if (d(rng) < 2) v = d(rng);
    std::vector<int> perm(c);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Mask gp = gt, pp = pred;
    for (auto& v : gp.labels) v = perm[static_cast<std::size_t>(v)];
    for (auto& v : pp.labels) v = perm[static_cast<std::size_t>(v)];
    ConfusionMatrix a(c), b(c);
    confusion_update(a, pred, gt);
    confusion_update(b, pp, gp);
    EXPECT_NEAR(miou(a).miou, miou(b).miou, 1e-15);
  }
}

TEST(Confusion, SplitImageAdditivityAndCommutativity) {
  const auto gt = random_mask(10, 6, 4, 30), pred = random_mask(10, 6, 4, 31);
  ConfusionMatrix full(4), top(4), bottom(4);
  confusion_update(full, pred, gt);
  auto half = [](const Mask& m, std::int64_t y0, std::int64_t y1) {
    Mask out(y1 - y0, m.width);
    for (std::int64_t y = y0; y < y1; ++y)
      for (std::int64_t x = 0; x < m.width; ++x) out.at(y - y0, x) = m.at(y, x);
    return out;
  };
  confusion_update(top, half(pred, 0, 4), half(gt, 0, 4));
  confusion_update(bottom, half(pred, 4, 10), half(gt, 4, 10));
  EXPECT_EQ(top + bottom, full);
  EXPECT_EQ(bottom + top, full);
  EXPECT_EQ(miou(top + bottom).miou, miou(full).miou);
}

TEST(EvalReport, CsvHasOneRowPerClass) {
  ConfusionMatrix m(3);
  m.at(0, 0) = 5;
  m.at(1, 1) = 2;
  m.at(2, 1) = 1;
  auto r = miou(m);
  r.class_names = {"background", "rice", "egg"};
  const auto csv = r.to_csv();
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "class_id,name,iou,gt_pixels");
  const auto s = r.summary();
  EXPECT_NE(s.find("49.4"), std::string::npos);
  EXPECT_NE(s.find("41.1"), std::string::npos);
}

TEST(Sliding, WindowOrigins) {
  EXPECT_EQ(window_origins(768, 512, 341), (std::vector<std::int64_t>{0, 256}));
  EXPECT_EQ(window_origins(300, 512, 341), (std::vector<std::int64_t>{0}));
  EXPECT_EQ(window_origins(96, 64, 32), (std::vector<std::int64_t>{0, 32}));
  EXPECT_EQ(window_origins(100, 64, 32), (std::vector<std::int64_t>{0, 32, 36}));
  for (std::int64_t size : {65, 100, 333, 1000}) {
    std::vector<int> cover(static_cast<std::size_t>(size), 0);
    for (auto o : window_origins(size, 64, 43))
      for (std::int64_t i = o; i < o + 64; ++i) ++cover[static_cast<std::size_t>(i)];
    for (int c : cover) EXPECT_GE(c, 1);
  }
  EXPECT_THROW(window_origins(100, 64, 65), std::invalid_argument);
}

TEST(Sliding, MatchesBruteForcePerPixelAverage) {
  const Tensor img = random_tensor({96, 96, 3}, 40);
  const auto got = sliding_logits(window_fn, img, 64, 32);
  Tensor sum({96, 96, 2});
  std::vector<int> count(96 * 96, 0);
  for (std::int64_t y0 = 0; y0 + 64 <= 96; y0 += 32)
    for (std::int64_t x0 = 0; x0 + 64 <= 96; x0 += 32) {
      Tensor crop({64, 64, 3});
      for (std::int64_t y = 0; y < 64; ++y)
        for (std::int64_t x = 0; x < 64; ++x)
          for (int c = 0; c < 3; ++c)
            crop[static_cast<std::size_t>((y * 64 + x) * 3 + c)] = img[static_cast<std::size_t>(((y0 + y) * 96 + x0 + x) * 3 + c)];
      const auto out = window_fn(crop);
      for (std::int64_t y = 0; y < 64; ++y)
        for (std::int64_t x = 0; x < 64; ++x) {
          ++count[static_cast<std::size_t>((y0 + y) * 96 + x0 + x)];
          for (int k = 0; k < 2; ++k)
            sum[static_cast<std::size_t>(((y0 + y) * 96 + x0 + x) * 2 + k)] += out[static_cast<std::size_t>((y * 64 + x) * 2 + k)];
        }
    }
  for (std::size_t p = 0; p < count.size(); ++p) {
    ASSERT_GE(count[p], 1);
    for (int k = 0; k < 2; ++k) EXPECT_NEAR(got[p * 2 + static_cast<std::size_t>(k)], sum[p * 2 + static_cast<std::size_t>(k)] / count[p], 1e-12);
  }
}

TEST(Sliding, ExactTilingEqualsPerTileForward) {
  const Tensor img = random_tensor({64, 96, 3}, 41);
  const auto got = sliding_logits(window_fn, img, 32, 32);
  for (std::int64_t ty = 0; ty < 2; ++ty)
    for (std::int64_t tx = 0; tx < 3; ++tx) {
      Tensor crop({32, 32, 3});
      for (std::int64_t y = 0; y < 32; ++y)
        for (std::int64_t x = 0; x < 32; ++x)
          for (int c = 0; c < 3; ++c)
            crop[static_cast<std::size_t>((y * 32 + x) * 3 + c)] = img[static_cast<std::size_t>(((ty * 32 + y) * 96 + tx * 32 + x) * 3 + c)];
      const auto out = window_fn(crop);
      for (std::int64_t y = 0; y < 32; ++y)
        for (std::int64_t x = 0; x < 32; ++x)
          for (int k = 0; k < 2; ++k)
            EXPECT_EQ(got[static_cast<std::size_t>(((ty * 32 + y) * 96 + tx * 32 + x) * 2 + k)], out[static_cast<std::size_t>((y * 32 + x) * 2 + k)]);
    }
}

TEST(Sliding, SmallImageIsOneWindowEqualToWholeForward) {
  const Tensor img = random_tensor({40, 50, 3}, 42);
  const auto sliding = sliding_logits(window_fn, img, 64, 43);
  const auto whole = whole_logits(window_fn, img, 64);
  EXPECT_EQ(sliding.shape(), (Shape{40, 50, 2}));
  EXPECT_EQ(max_abs_diff(sliding, whole), 0.0);
}

TEST(Render, PanelLayoutAndIdenticalMasks) {
  Image img(10, 12, 0.25);
  const auto gt = random_mask(10, 12, 5, 50);
  const auto pal = class_palette();
  const auto panel = render_panel(img, gt, gt, pal);
  EXPECT_EQ(panel.width, 3 * 12 + 2 * kPanelGutter);
  EXPECT_EQ(panel.height, 10);
  const auto px = [&](std::int64_t y, std::int64_t x, int c) {
    return panel.data[static_cast<std::size_t>((y * panel.width + x) * 3 + c)];
  };
  for (std::int64_t y = 0; y < 10; ++y)
    for (std::int64_t x = 0; x < 12; ++x)
      for (int c = 0; c < 3; ++c) {
        EXPECT_EQ(px(y, 12 + kPanelGutter + x, c), px(y, 2 * (12 + kPanelGutter) + x, c));
        EXPECT_EQ(px(y, 12 + kPanelGutter + x, c), pal[static_cast<std::size_t>(gt.at(y, x))][static_cast<std::size_t>(c)]);
      }
  EXPECT_EQ(px(0, 12, 0), 255);
}

TEST(Render, PaletteIsDeterministicAndDistinct) {
  const auto a = class_palette(), b = class_palette();
  EXPECT_EQ(a, b);
  EXPECT_EQ(a[0], (Color{0, 0, 0}));
  EXPECT_EQ(a[1], (Color{128, 0, 0}));
  EXPECT_EQ(a[2], (Color{0, 128, 0}));
  std::set<Color> distinct(a.begin(), a.begin() + 104);
  EXPECT_EQ(distinct.size(), 104u);
}

TEST(ReferenceRows, FullScaleNumbers) {
  const auto& rows = reference_results();
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows[0].miou, 49.4);
  EXPECT_EQ(rows[1].miou, 41.1);
}
