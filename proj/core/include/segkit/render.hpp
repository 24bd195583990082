#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "segkit/image_io.hpp"

namespace segkit {

using Color = std::array<std::uint8_t, 3>;

/// Class colors from the bit-interleaved scheme common to segmentation tools;
/// class 0 is black.
std::vector<Color> class_palette(int num_colors = 256);

Rgb8Image colorize(const Mask& mask, const std::vector<Color>& palette);

inline constexpr int kPanelGutter = 8;

/// input | prediction | ground truth, separated by white gutters.
/// Width is 3 * W + 2 * gutter.
Rgb8Image render_panel(const Image& image, const Mask& pred, const Mask& gt, const std::vector<Color>& palette,
                       int gutter = kPanelGutter);

}  // namespace segkit
