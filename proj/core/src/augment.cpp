#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "segkit/dataset.hpp"

namespace segkit {

Image Normalization::apply(const Image& image) const {
  Image out = image;
  auto& px = out.pixels;
  for (std::size_t i = 0; i < px.size(); ++i) {
    const auto c = i % 3;
    px[i] = (px[i] - mean[c]) / std[c];
  }
  return out;
}

AugmentConfig AugmentConfig::identity(int crop) {
  AugmentConfig c;
  c.scale_min = c.scale_max = 1.0;
  c.crop = crop;
  c.flip_prob = 0.0;
  c.brightness = c.contrast = c.saturation = 0.0;
  c.normalization = Normalization::identity();
  return c;
}

Image resize_image(const Image& image, std::int64_t height, std::int64_t width) {
  if (height == image.height() && width == image.width()) return image;
  NoGradGuard guard;
  const Var in(image.pixels);
  return Image(ops::resize_bilinear(in, height, width).value());
}

Mask resize_mask_nearest(const Mask& mask, std::int64_t height, std::int64_t width) {
  if (height == mask.height && width == mask.width) return mask;
  Mask out(height, width);
  for (std::int64_t y = 0; y < height; ++y) {
    const auto sy = std::min(mask.height - 1, (y * mask.height) / height);
    for (std::int64_t x = 0; x < width; ++x) {
      const auto sx = std::min(mask.width - 1, (x * mask.width) / width);
      out.at(y, x) = mask.at(sy, sx);
    }
  }
  return out;
}

ImageSample augment(const ImageSample& sample, const AugmentConfig& config, Rng& rng) {
  if (config.crop <= 0) throw std::invalid_argument("augment: crop must be positive");
  if (config.scale_min <= 0 || config.scale_max < config.scale_min) throw std::invalid_argument("augment: bad scale range");
  std::uniform_real_distribution<double> u(0.0, 1.0);

  // Every draw happens unconditionally so the stream layout does not depend on the config.
  const double scale = config.scale_min + (config.scale_max - config.scale_min) * u(rng);
  const double crop_u = u(rng), crop_v = u(rng), flip_u = u(rng);
  const double bright = config.brightness * (2.0 * u(rng) - 1.0);
  const double contrast = 1.0 + config.contrast * (2.0 * u(rng) - 1.0);
  const double satur = 1.0 + config.saturation * (2.0 * u(rng) - 1.0);

  const auto h = std::max<std::int64_t>(1, std::llround(static_cast<double>(sample.image.height()) * scale));
  const auto w = std::max<std::int64_t>(1, std::llround(static_cast<double>(sample.image.width()) * scale));
  const Image scaled = resize_image(sample.image, h, w);
  const Mask scaled_mask = resize_mask_nearest(sample.mask, h, w);

  const std::int64_t crop = config.crop;
  const auto oy = h > crop ? static_cast<std::int64_t>(crop_u * static_cast<double>(h - crop + 1)) : 0;
  const auto ox = w > crop ? static_cast<std::int64_t>(crop_v * static_cast<double>(w - crop + 1)) : 0;
  const bool flip = flip_u < config.flip_prob;

  ImageSample out{Image(crop, crop, 0.0), Mask(crop, crop, 0), sample.id};
  for (std::int64_t y = 0; y < crop; ++y) {
    const auto sy = y + oy;
    if (sy >= h) continue;
    for (std::int64_t x = 0; x < crop; ++x) {
      const auto sx = x + ox;
      if (sx >= w) continue;
      const auto dx = flip ? crop - 1 - x : x;
      out.mask.at(y, dx) = scaled_mask.at(sy, sx);
      for (int c = 0; c < 3; ++c) out.image.at(y, dx, c) = scaled.at(sy, sx, c);
    }
  }

  if (bright != 0.0 || contrast != 1.0 || satur != 1.0) {
    auto& px = out.image.pixels;
    double mean = 0.0;
    for (std::size_t i = 0; i < px.size(); ++i) mean += px[i];
    mean /= static_cast<double>(px.size());
    for (std::size_t i = 0; i < px.size(); i += 3) {
      const double gray = 0.299 * px[i] + 0.587 * px[i + 1] + 0.114 * px[i + 2];
      for (int c = 0; c < 3; ++c) {
        double v = px[i + c];
        v = gray + satur * (v - gray);
        v = mean + contrast * (v - mean);
        px[i + c] = std::clamp(v + bright, 0.0, 1.0);
      }
    }
  }
  out.image = config.normalization.apply(out.image);
  return out;
}

}  // namespace segkit
