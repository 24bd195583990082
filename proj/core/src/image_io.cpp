#include "segkit/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <string>

// jpeglib.h needs FILE and size_t declared first.
#include <jpeglib.h>

namespace segkit {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.string().c_str(), mode));
  if (!f) throw std::runtime_error("cannot open file: " + path.string());
  return f;
}

struct RawImage {
  std::int64_t height = 0, width = 0;
  int channels = 0;
  std::vector<std::uint8_t> bytes;
};

RawImage read_png_raw(const std::filesystem::path& path, bool keep_palette_indices) {
  auto file = open_file(path, "rb");
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw std::runtime_error("not a PNG file: " + path.string());
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw std::runtime_error("png_create_info_struct failed");
  }
  RawImage raw;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("corrupt PNG: " + path.string());
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  const auto depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) {
    if (keep_palette_indices) {
      if (depth < 8) png_set_packing(png);
    } else {
      png_set_palette_to_rgb(png);
    }
  }
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (!keep_palette_indices && png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  raw.width = png_get_image_width(png, info);
  raw.height = png_get_image_height(png, info);
  raw.channels = png_get_channels(png, info);
  const auto stride = png_get_rowbytes(png, info);
  raw.bytes.resize(stride * static_cast<std::size_t>(raw.height));
  rows.resize(static_cast<std::size_t>(raw.height));
  for (std::int64_t y = 0; y < raw.height; ++y) rows[static_cast<std::size_t>(y)] = raw.bytes.data() + y * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return raw;
}

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  std::longjmp(err->jump, 1);
}

RawImage read_jpeg_raw(const std::filesystem::path& path) {
  auto file = open_file(path, "rb");
  jpeg_decompress_struct cinfo{};
  JpegErrorManager jerr{};
  cinfo.err = jpeg_std_error(&jerr.base);
  jerr.base.error_exit = jpeg_error_exit;
  RawImage raw;
  if (setjmp(jerr.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw std::runtime_error("corrupt JPEG: " + path.string());
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, file.get());
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  raw.width = cinfo.output_width;
  raw.height = cinfo.output_height;
  raw.channels = cinfo.output_components;
  const auto stride = static_cast<std::size_t>(raw.width * raw.channels);
  raw.bytes.resize(stride * static_cast<std::size_t>(raw.height));
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = raw.bytes.data() + cinfo.output_scanline * stride;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return raw;
}

bool has_png_signature(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open file: " + path.string());
  unsigned char sig[8] = {};
  in.read(reinterpret_cast<char*>(sig), 8);
  return in.gcount() == 8 && png_sig_cmp(sig, 0, 8) == 0;
}

}  // namespace

Image::Image(Tensor t) : pixels(std::move(t)) {
  if (pixels.rank() != 3 || pixels.dim(2) != 3) {
    throw std::invalid_argument("Image expects an [H, W, 3] tensor, got " + shape_string(pixels.shape()));
  }
}

Image read_image(const std::filesystem::path& path) {
  const RawImage raw = has_png_signature(path) ? read_png_raw(path, false) : read_jpeg_raw(path);
  Image img(raw.height, raw.width);
  for (std::int64_t i = 0; i < raw.height * raw.width; ++i) {
    for (int c = 0; c < 3; ++c) {
      int src = 0;
      if (raw.channels >= 3) src = c;
      const auto byte = raw.bytes[static_cast<std::size_t>(i * raw.channels + src)];
      img.pixels[static_cast<std::size_t>(i * 3 + c)] = static_cast<double>(byte) / 255.0;
    }
  }
  return img;
}

ImageDims image_dimensions(const std::filesystem::path& path) {
  if (has_png_signature(path)) {
    std::ifstream in(path, std::ios::binary);
    unsigned char hdr[24] = {};
    in.read(reinterpret_cast<char*>(hdr), 24);
    if (in.gcount() != 24) throw std::runtime_error("truncated PNG header: " + path.string());
    auto be32 = [&](int at) {
      return (static_cast<std::int64_t>(hdr[at]) << 24) | (static_cast<std::int64_t>(hdr[at + 1]) << 16) |
             (static_cast<std::int64_t>(hdr[at + 2]) << 8) | static_cast<std::int64_t>(hdr[at + 3]);
    };
    return {be32(20), be32(16)};
  }
  auto file = open_file(path, "rb");
  jpeg_decompress_struct cinfo{};
  JpegErrorManager jerr{};
  cinfo.err = jpeg_std_error(&jerr.base);
  jerr.base.error_exit = jpeg_error_exit;
  if (setjmp(jerr.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw std::runtime_error("unreadable image header: " + path.string());
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, file.get());
  jpeg_read_header(&cinfo, TRUE);
  ImageDims dims{static_cast<std::int64_t>(cinfo.image_height), static_cast<std::int64_t>(cinfo.image_width)};
  jpeg_destroy_decompress(&cinfo);
  return dims;
}

Mask read_mask(const std::filesystem::path& path) {
  const RawImage raw = read_png_raw(path, true);
  if (raw.channels != 1) {
    throw std::runtime_error("mask must be single-channel, " + path.string() + " has " +
                             std::to_string(raw.channels) + " channels");
  }
  Mask m(raw.height, raw.width);
  for (std::size_t i = 0; i < m.labels.size(); ++i) m.labels[i] = raw.bytes[i];
  return m;
}

void write_png(const std::filesystem::path& path, const Rgb8Image& image) {
  png_image out{};
  out.version = PNG_IMAGE_VERSION;
  out.width = static_cast<png_uint_32>(image.width);
  out.height = static_cast<png_uint_32>(image.height);
  out.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&out, path.string().c_str(), 0, image.data.data(), 0, nullptr)) {
    throw std::runtime_error("failed to write PNG " + path.string() + ": " + out.message);
  }
}

void write_png(const std::filesystem::path& path, const Image& image) {
  Rgb8Image rgb{image.height(), image.width(), std::vector<std::uint8_t>(image.pixels.size())};
  for (std::size_t i = 0; i < image.pixels.size(); ++i) {
    rgb.data[i] = static_cast<std::uint8_t>(std::lround(std::clamp(image.pixels[i], 0.0, 1.0) * 255.0));
  }
  write_png(path, rgb);
}

void write_mask_png(const std::filesystem::path& path, const Mask& mask) {
  std::vector<std::uint8_t> bytes(mask.labels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const auto v = mask.labels[i];
    if (v < 0 || v > 255) throw std::invalid_argument("mask label " + std::to_string(v) + " does not fit 8 bits");
    bytes[i] = static_cast<std::uint8_t>(v);
  }
  png_image out{};
  out.version = PNG_IMAGE_VERSION;
  out.width = static_cast<png_uint_32>(mask.width);
  out.height = static_cast<png_uint_32>(mask.height);
  out.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&out, path.string().c_str(), 0, bytes.data(), 0, nullptr)) {
    throw std::runtime_error("failed to write PNG " + path.string() + ": " + out.message);
  }
}

Rgb8Image read_png_rgb8(const std::filesystem::path& path) {
  const RawImage raw = read_png_raw(path, false);
  Rgb8Image img{raw.height, raw.width, std::vector<std::uint8_t>(static_cast<std::size_t>(raw.height * raw.width * 3))};
  for (std::int64_t i = 0; i < raw.height * raw.width; ++i)
    for (int c = 0; c < 3; ++c)
      img.data[static_cast<std::size_t>(i * 3 + c)] =
          raw.bytes[static_cast<std::size_t>(i * raw.channels + (raw.channels >= 3 ? c : 0))];
  return img;
}

}  // namespace segkit
