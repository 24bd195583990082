#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "segkit/dataset.hpp"
#include "test_util.hpp"

using namespace segkit;
namespace fs = std::filesystem;

namespace {

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

ToyDatasetOptions toy_options(std::uint64_t seed = 1) {
  ToyDatasetOptions o;
  o.seed = seed;
  o.n_images = 8;
  o.n_classes = 5;
  o.size = 64;
  o.n_test = 3;
  return o;
}

}  // namespace

TEST(Dataset, ToyManifestListsEightSortedIds) {
  const auto root = segkit::testing::temp_dir("toy_manifest");
  const auto m = generate_toy_dataset(root, toy_options());
  ASSERT_EQ(m.size(), 8u);
  EXPECT_EQ(m.num_classes, 5);
  EXPECT_EQ(m.split, "train");
  for (std::size_t i = 1; i < m.size(); ++i) EXPECT_LT(m.samples[i - 1].id, m.samples[i].id);
  const auto test = load_dataset(root, "test");
  EXPECT_EQ(test.size(), 3u);
  for (const auto& a : m.samples)
    for (const auto& b : test.samples) EXPECT_NE(a.id, b.id);
}

TEST(Dataset, ToyGenerationIsByteIdentical) {
  const auto a = segkit::testing::temp_dir("toy_a"), b = segkit::testing::temp_dir("toy_b");
  generate_toy_dataset(a, toy_options());
  generate_toy_dataset(b, toy_options());
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), a);
    EXPECT_EQ(file_bytes(e.path()), file_bytes(b / rel)) << rel;
  }
}

TEST(Dataset, DifferentSeedsGiveDifferentMasks) {
  const auto a = segkit::testing::temp_dir("toy_s1"), b = segkit::testing::temp_dir("toy_s2");
  const auto ma = generate_toy_dataset(a, toy_options(1));
  const auto mb = generate_toy_dataset(b, toy_options(2));
  EXPECT_NE(ma.load(0).mask, mb.load(0).mask);
}

TEST(Dataset, ToyMasksStayInRangeAndMatchImages) {
  const auto root = segkit::testing::temp_dir("toy_range");
  const auto m = generate_toy_dataset(root, toy_options());
  std::set<int> seen;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto s = m.load(i);
    EXPECT_EQ(s.image.height(), s.mask.height);
    EXPECT_EQ(s.image.width(), s.mask.width);
    for (auto v : s.mask.labels) {
      EXPECT_GE(v, 0);
      EXPECT_LT(v, 5);
      seen.insert(v);
    }
    for (auto v : s.image.pixels.values()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
  EXPECT_TRUE(seen.count(0));
  EXPECT_GE(seen.size(), 3u);
}

TEST(Dataset, GeneratorRejectsBadArguments) {
  const auto root = segkit::testing::temp_dir("toy_bad");
  auto o = toy_options();
  o.n_classes = 1;
  EXPECT_THROW(generate_toy_dataset(root, o), std::invalid_argument);
  o = toy_options();
  o.size = 16;
  EXPECT_THROW(generate_toy_dataset(root, o), std::invalid_argument);
}

TEST(Dataset, LoadErrors) {
  const auto root = segkit::testing::temp_dir("toy_errors");
  generate_toy_dataset(root, toy_options());
  try {
    load_dataset(root / "nope", "train");
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("dataset root not found"), std::string::npos);
  }
  // missing mask for one image
  fs::remove(root / "masks" / "train" / "img_0003.png");
  try {
    load_dataset(root, "train");
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("missing mask for image id img_0003"), std::string::npos);
  }
  fs::remove_all(root / "masks");
  try {
    load_dataset(root, "train");
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("mask directory not found"), std::string::npos);
  }
}

TEST(Dataset, SizeMismatchAndOutOfRangeMaskAreErrors) {
  const auto root = segkit::testing::temp_dir("toy_mismatch");
  generate_toy_dataset(root, toy_options());
  write_mask_png(root / "masks" / "train" / "img_0001.png", Mask(32, 64, 0));
  EXPECT_THROW(load_dataset(root, "train"), std::runtime_error);
  write_mask_png(root / "masks" / "train" / "img_0001.png", Mask(64, 64, 7));
  try {
    load_dataset(root, "train");
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("mask value 7 >= num_classes"), std::string::npos);
  }
}

TEST(ClassFrequency, MatchesDirectHistogram) {
  const auto root = segkit::testing::temp_dir("toy_freq");
  const auto train = generate_toy_dataset(root, toy_options());
  const auto test = load_dataset(root, "test");
  const auto report = class_frequency_report(train, test);
  // Independent scan straight from the PNG files.
  std::map<int, std::int64_t> pixels, train_images, test_images;
  for (const auto& e : fs::directory_iterator(root / "masks" / "train")) {
    const auto m = read_mask(e.path());
    std::set<int> present(m.labels.begin(), m.labels.end());
    for (auto v : m.labels) ++pixels[v];
    for (auto v : present) ++train_images[v];
  }
  for (const auto& e : fs::directory_iterator(root / "masks" / "test")) {
    const auto m = read_mask(e.path());
    for (auto v : std::set<int>(m.labels.begin(), m.labels.end())) ++test_images[v];
  }
  ASSERT_EQ(report.classes.size(), 5u);
  std::int64_t image_sum = 0;
  for (const auto& c : report.classes) {
    EXPECT_EQ(c.train_pixels, pixels[c.class_id]);
    EXPECT_EQ(c.train_images, train_images[c.class_id]);
    EXPECT_EQ(c.test_images, test_images[c.class_id]);
    EXPECT_EQ(c.long_tail, c.train_images <= 10);
    image_sum += c.train_images;
  }
  EXPECT_GE(image_sum, 8);
  EXPECT_EQ(report.classes[0].train_images, 8);  // background appears everywhere
  EXPECT_EQ(report.to_csv().substr(0, report.to_csv().find('\n')), "class_id,name,train_images,test_images,train_pixels,long_tail");
}

TEST(ClassFrequency, ClassInEveryImageCountsAllImages) {
  const auto root = segkit::testing::temp_dir("toy_every");
  write_descriptor(root, {3, {"background", "rice", "egg"}});
  for (const auto* split : {"train", "test"}) {
    fs::create_directories(root / "images" / split);
    fs::create_directories(root / "masks" / split);
  }
  for (int i = 0; i < 6; ++i) {
    Mask m(32, 32, 0);
    m.at(3, 3) = 2;
    if (i % 2) m.at(5, 5) = 1;
    const auto id = "s" + std::to_string(i);
    write_png(root / "images" / "train" / (id + ".png"), Image(32, 32, 0.5));
    write_mask_png(root / "masks" / "train" / (id + ".png"), m);
  }
  const auto train = load_dataset(root, "train");
  const auto report = class_frequency_report(train, load_dataset(root, "test"), 3);
  EXPECT_EQ(report.find("egg")->train_images, 6);
  EXPECT_EQ(report.find("rice")->train_images, 3);
  EXPECT_TRUE(report.find("rice")->long_tail);
  EXPECT_FALSE(report.find("egg")->long_tail);
}

TEST(Augment, CropProducesRequestedSize) {
  ImageSample s{Image(40, 56, 0.3), Mask(40, 56, 1), "x"};
  AugmentConfig cfg;
  cfg.crop = 512;
  Rng rng(3);
  const auto out = augment(s, cfg, rng);
  EXPECT_EQ(out.image.height(), 512);
  EXPECT_EQ(out.image.width(), 512);
  EXPECT_EQ(out.mask.height, 512);
  EXPECT_EQ(out.mask.width, 512);
}

TEST(Augment, IdentityPipelineLeavesSampleUnchanged) {
  const auto root = segkit::testing::temp_dir("toy_aug_id");
  const auto m = generate_toy_dataset(root, toy_options());
  const auto s = m.load(0);
  Rng rng(5);
  const auto out = augment(s, AugmentConfig::identity(64), rng);
  EXPECT_EQ(out.mask, s.mask);
  EXPECT_EQ(max_abs_diff(out.image.pixels, s.image.pixels), 0.0);
}

TEST(Augment, DeterministicForSeed) {
  const auto root = segkit::testing::temp_dir("toy_aug_det");
  const auto s = generate_toy_dataset(root, toy_options()).load(1);
  AugmentConfig cfg;
  cfg.crop = 48;
  Rng a(11), b(11);
  const auto x = augment(s, cfg, a), y = augment(s, cfg, b);
  EXPECT_EQ(x.mask, y.mask);
  EXPECT_EQ(max_abs_diff(x.image.pixels, y.image.pixels), 0.0);
}

TEST(Augment, MaskValuesAreSubsetPlusBackground) {
  const auto root = segkit::testing::temp_dir("toy_aug_subset");
  const auto m = generate_toy_dataset(root, toy_options());
  AugmentConfig cfg;
  cfg.crop = 80;
  Rng rng(17);
  for (int trial = 0; trial < 40; ++trial) {
    const auto s = m.load(static_cast<std::size_t>(trial % 8));
    std::set<int> allowed(s.mask.labels.begin(), s.mask.labels.end());
    allowed.insert(0);
    const auto out = augment(s, cfg, rng);
    for (auto v : out.mask.labels) EXPECT_TRUE(allowed.count(v)) << v;
  }
}

TEST(ImageFolder, ToyFolderHasClassesAndImages) {
  const auto root = segkit::testing::temp_dir("folder");
  const auto f = generate_toy_image_folder(root, 1, 3, 4, 32);
  EXPECT_EQ(f.images.size(), 12u);
  const auto g = load_image_folder(root);
  EXPECT_EQ(g.class_names.size(), 3u);
  EXPECT_EQ(g.images.size(), 12u);
  EXPECT_EQ(read_image(g.images[0]).height(), 32);
}

TEST(Dataset, FoodSeg103TotalsWhenAvailable) {
  const char* root = std::getenv("FOODSEG103_ROOT");
  if (!root) GTEST_SKIP() << "FOODSEG103_ROOT not set";
  const auto train = load_dataset(root, "train");
  const auto test = load_dataset(root, "test");
  EXPECT_EQ(train.num_classes, 104);
  EXPECT_EQ(train.size() + test.size(), 7118u);
  const auto report = class_frequency_report(train, test);
  ASSERT_NE(report.find("hamburger"), nullptr);
  EXPECT_EQ(report.find("hamburger")->train_images, 7);
  EXPECT_EQ(report.find("hamburger")->test_images, 1);
  ASSERT_NE(report.find("kelp"), nullptr);
  EXPECT_EQ(report.find("kelp")->train_images, 4);
  EXPECT_EQ(report.find("kelp")->test_images, 5);
}
