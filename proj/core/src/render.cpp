#include "segkit/render.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace segkit {

std::vector<Color> class_palette(int num_colors) {
  std::vector<Color> out(static_cast<std::size_t>(num_colors));
  for (int i = 0; i < num_colors; ++i) {
    int id = i;
    Color c{0, 0, 0};
    for (int bit = 7; id > 0; --bit, id >>= 3) {
      c[0] |= static_cast<std::uint8_t>(((id >> 0) & 1) << bit);
      c[1] |= static_cast<std::uint8_t>(((id >> 1) & 1) << bit);
      c[2] |= static_cast<std::uint8_t>(((id >> 2) & 1) << bit);
    }
    out[static_cast<std::size_t>(i)] = c;
  }
  return out;
}

Rgb8Image colorize(const Mask& mask, const std::vector<Color>& palette) {
  Rgb8Image out{mask.height, mask.width, std::vector<std::uint8_t>(static_cast<std::size_t>(mask.height * mask.width * 3))};
  for (std::size_t i = 0; i < mask.labels.size(); ++i) {
    const auto l = mask.labels[i];
    if (l < 0 || static_cast<std::size_t>(l) >= palette.size()) throw std::out_of_range("colorize: label outside palette");
    std::copy_n(palette[static_cast<std::size_t>(l)].begin(), 3, out.data.begin() + static_cast<std::ptrdiff_t>(i * 3));
  }
  return out;
}

Rgb8Image render_panel(const Image& image, const Mask& pred, const Mask& gt, const std::vector<Color>& palette,
                       int gutter) {
  const auto h = image.height(), w = image.width();
  if (pred.height != h || pred.width != w || gt.height != h || gt.width != w) {
    throw std::invalid_argument("render_panel: image, prediction and ground truth must share a size");
  }
  if (gutter < 0) throw std::invalid_argument("render_panel: negative gutter");
  Rgb8Image out;
  out.height = h;
  out.width = 3 * w + 2 * gutter;
  out.data.assign(static_cast<std::size_t>(out.height * out.width * 3), 255);
  auto put = [&](std::int64_t panel, std::int64_t y, std::int64_t x, const std::uint8_t* rgb) {
    const auto col = panel * (w + gutter) + x;
    std::copy_n(rgb, 3, out.data.begin() + static_cast<std::ptrdiff_t>((y * out.width + col) * 3));
  };
  const Rgb8Image p = colorize(pred, palette), g = colorize(gt, palette);
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      std::uint8_t rgb[3];
      for (int c = 0; c < 3; ++c) {
        rgb[c] = static_cast<std::uint8_t>(std::lround(std::clamp(image.at(y, x, c), 0.0, 1.0) * 255.0));
      }
      put(0, y, x, rgb);
      put(1, y, x, p.data.data() + (y * w + x) * 3);
      put(2, y, x, g.data.data() + (y * w + x) * 3);
    }
  }
  return out;
}

}  // namespace segkit
