#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "segkit/image_io.hpp"
#include "segkit/nn.hpp"

namespace segkit {

/// An RGB image with its aligned per-pixel class mask.
struct ImageSample {
  Image image;
  Mask mask;
  std::string id;
};

struct SampleEntry {
  std::string id;
  std::filesystem::path image_path;
  std::filesystem::path mask_path;
};

/// One split of a dataset laid out as root/{images,masks}/<split>/<id>.<ext>
/// with a `dataset.json` descriptor at the root. Samples are sorted by id.
struct DatasetManifest {
  std::filesystem::path root;
  std::string split;
  int num_classes = 0;
  std::vector<std::string> class_names;
  std::vector<SampleEntry> samples;

  std::size_t size() const { return samples.size(); }
  ImageSample load(std::size_t index) const;
};

/// Loads and validates a split. Every mask is decoded to check sizes and label range.
DatasetManifest load_dataset(const std::filesystem::path& root, const std::string& split);

/// Descriptor contents: num_classes and class names (index = class id).
struct DatasetDescriptor {
  int num_classes = 0;
  std::vector<std::string> class_names;
};
DatasetDescriptor read_descriptor(const std::filesystem::path& root);
void write_descriptor(const std::filesystem::path& root, const DatasetDescriptor& descriptor);

struct ClassFrequency {
  int class_id = 0;
  std::string name;
  std::int64_t train_images = 0;
  std::int64_t test_images = 0;
  std::int64_t train_pixels = 0;
  bool long_tail = false;
};

struct ClassFrequencyReport {
  std::vector<ClassFrequency> classes;
  std::int64_t train_image_total = 0;
  std::int64_t test_image_total = 0;
  int long_tail_threshold = 10;

  std::string to_csv() const;
  std::string long_tail_summary() const;
  const ClassFrequency* find(const std::string& name) const;
};

inline constexpr int kDefaultLongTailThreshold = 10;

/// Per-class image and pixel counts for `manifest`, with image counts from
/// `companion` (normally the test split). A class is long-tail when its
/// image count in `manifest` is at most the threshold.
ClassFrequencyReport class_frequency_report(const DatasetManifest& manifest, const DatasetManifest& companion,
                                            int long_tail_threshold = kDefaultLongTailThreshold);

struct ToyDatasetOptions {
  std::uint64_t seed = 1;
  int n_images = 8;
  int n_classes = 5;
  int size = 64;
  int n_test = 0;
};

/// Writes a deterministic synthetic dataset of textured disks, rectangles and
/// checker patches over a plate-like background. Returns the train manifest.
DatasetManifest generate_toy_dataset(const std::filesystem::path& root, const ToyDatasetOptions& options);

/// Plain image folder: root/<class>/<file>. Images directly under root get class -1.
struct ImageFolder {
  std::vector<std::filesystem::path> images;
  std::vector<int> labels;
  std::vector<std::string> class_names;
};
ImageFolder load_image_folder(const std::filesystem::path& root);

/// Writes `per_class` images for each of `n_classes` synthetic dishes. Each
/// dish draws from its own pair of ingredient appearances.
ImageFolder generate_toy_image_folder(const std::filesystem::path& root, std::uint64_t seed, int n_classes,
                                      int per_class, int size);

struct Normalization {
  double mean[3] = {0.5, 0.5, 0.5};
  double std[3] = {0.25, 0.25, 0.25};

  static Normalization identity() { return {{0.0, 0.0, 0.0}, {1.0, 1.0, 1.0}}; }
  Image apply(const Image& image) const;
};

struct AugmentConfig {
  double scale_min = 0.5;
  double scale_max = 2.0;
  int crop = 512;
  double flip_prob = 0.5;
  double brightness = 0.1;
  double contrast = 0.1;
  double saturation = 0.1;
  Normalization normalization;

  /// Leaves an input of the given crop size untouched.
  static AugmentConfig identity(int crop);
};

/// Random rescale, crop (background padding), horizontal flip, photometric
/// jitter and normalization. The mask only sees the geometric steps, with
/// nearest-neighbour resampling.
ImageSample augment(const ImageSample& sample, const AugmentConfig& config, Rng& rng);

Image resize_image(const Image& image, std::int64_t height, std::int64_t width);
Mask resize_mask_nearest(const Mask& mask, std::int64_t height, std::int64_t width);

}  // namespace segkit
