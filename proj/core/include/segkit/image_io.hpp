#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "segkit/tensor.hpp"

namespace segkit {

/// RGB image stored as an [H, W, 3] tensor of values nominally in [0, 1].
struct Image {
  Tensor pixels;

  Image() = default;
  Image(std::int64_t height, std::int64_t width, double fill = 0.0) : pixels(Shape{height, width, 3}, fill) {}
  explicit Image(Tensor t);

  std::int64_t height() const { return pixels.empty() ? 0 : pixels.dim(0); }
  std::int64_t width() const { return pixels.empty() ? 0 : pixels.dim(1); }
  double& at(std::int64_t y, std::int64_t x, int c) { return pixels[static_cast<std::size_t>((y * width() + x) * 3 + c)]; }
  double at(std::int64_t y, std::int64_t x, int c) const {
    return pixels[static_cast<std::size_t>((y * width() + x) * 3 + c)];
  }
};

/// Per-pixel class ids, row-major.
struct Mask {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<std::int32_t> labels;

  Mask() = default;
  Mask(std::int64_t h, std::int64_t w, std::int32_t fill = 0)
      : height(h), width(w), labels(static_cast<std::size_t>(h * w), fill) {}

  std::int32_t& at(std::int64_t y, std::int64_t x) { return labels[static_cast<std::size_t>(y * width + x)]; }
  std::int32_t at(std::int64_t y, std::int64_t x) const { return labels[static_cast<std::size_t>(y * width + x)]; }
  bool operator==(const Mask&) const = default;
};

/// Reads PNG or JPEG as RGB; grayscale inputs are replicated to three channels.
Image read_image(const std::filesystem::path& path);
/// Reads a single-channel 8-bit PNG whose pixel values are class ids.
/// Palette PNGs yield their raw palette indices.
Mask read_mask(const std::filesystem::path& path);

struct ImageDims {
  std::int64_t height = 0;
  std::int64_t width = 0;
};
/// Reads only the header of a PNG or JPEG file.
ImageDims image_dimensions(const std::filesystem::path& path);

/// Writes an 8-bit RGB PNG, clamping to [0, 1] and rounding.
void write_png(const std::filesystem::path& path, const Image& image);
/// Writes an 8-bit single-channel PNG; labels must lie in [0, 255].
void write_mask_png(const std::filesystem::path& path, const Mask& mask);

/// 8-bit RGB buffer in row-major order; used for rendering.
struct Rgb8Image {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<std::uint8_t> data;
};
void write_png(const std::filesystem::path& path, const Rgb8Image& image);
Rgb8Image read_png_rgb8(const std::filesystem::path& path);

}  // namespace segkit
