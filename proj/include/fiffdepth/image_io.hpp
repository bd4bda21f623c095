// fiffdepth/image_io.hpp

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

// PFM (32-bit float) and 8-bit PNG files.

#pragma once

#include <png.h>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "fiffdepth/codec.hpp"

namespace fiffdepth {

/// Single-channel little-endian PFM ("Pf", scale -1.0). Rows are stored
/// bottom to top as the format requires.
inline void write_pfm(const std::filesystem::path& path, const DepthMap& d) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << "Pf\n" << d.width() << " " << d.height() << "\n-1.0\n";
  std::vector<float> row(d.width());
  for (int y = d.height() - 1; y >= 0; --y) {
    for (int x = 0; x < d.width(); ++x) row[x] = static_cast<float>(d.at(y, x));
    if constexpr (std::endian::native == std::endian::big) {
      for (auto& v : row) {
        auto u = std::bit_cast<std::uint32_t>(v);
        u = __builtin_bswap32(u);
        v = std::bit_cast<float>(u);
      }
    }
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size() * 4));
  }
  if (!f) throw IoError("write failed: " + path.string());
}

/// Reads "Pf" (grayscale) or "PF" (colour; channel mean is taken) files of
/// either endianness. The valid mask is the set of finite pixels.
inline DepthMap read_pfm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::string magic;
  int w = 0, h = 0;
  double scale = 0;
  f >> magic >> w >> h >> scale;
  f.get();
  if (!f || (magic != "Pf" && magic != "PF") || w <= 0 || h <= 0 || scale == 0)
    throw IoError("bad PFM header: " + path.string());
  const int ch = magic == "PF" ? 3 : 1;
  const bool little = scale < 0;
  std::vector<std::uint32_t> raw(static_cast<std::size_t>(w) * h * ch);
  f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * 4));
  if (!f) throw IoError("truncated PFM data: " + path.string());
  const bool swap = little != (std::endian::native == std::endian::little);
  DepthMap d(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0;
      for (int c = 0; c < ch; ++c) {
        auto u = raw[(static_cast<std::size_t>(h - 1 - y) * w + x) * ch + c];
        if (swap) u = __builtin_bswap32(u);
        s += std::bit_cast<float>(u);
      }
      const double v = s / ch;
      d.at(y, x) = v;
      d.valid[static_cast<std::size_t>(y) * w + x] = std::isfinite(v) ? 1 : 0;
    }
  return d;
}

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const noexcept {
    if (f) std::fclose(f);
  }
};

}  // namespace detail

/// Writes 8-bit PNG; channels = 1 (gray) or 3 (RGB); row-major interleaved.
inline void write_png(const std::filesystem::path& path, int width, int height, int channels,
                      const std::vector<std::uint8_t>& pixels) {
  std::unique_ptr<std::FILE, detail::FileCloser> fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("libpng init failed for " + path.string());
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("PNG encoding failed: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, width, height, 8, channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  // no timestamp or text chunks
  png_write_info(png, info);
  for (int y = 0; y < height; ++y)
    png_write_row(png, const_cast<png_bytep>(pixels.data() + static_cast<std::size_t>(y) * width * channels));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

struct PngImage {
  int width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> pixels;
};

inline PngImage read_png(const std::filesystem::path& path) {
  std::unique_ptr<std::FILE, detail::FileCloser> fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError("cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("libpng init failed for " + path.string());
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("PNG decoding failed: " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_packing(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_read_update_info(png, info);
  PngImage img;
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  img.channels = png_get_channels(png, info);
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * img.channels);
  std::vector<png_bytep> rows(img.height);
  for (int y = 0; y < img.height; ++y)
    rows[y] = img.pixels.data() + static_cast<std::size_t>(y) * img.width * img.channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

inline void write_rgb_png(const std::filesystem::path& path, const PixelImage& img) {
  const int H = img.height(), W = img.width();
  std::vector<std::uint8_t> px(static_cast<std::size_t>(H) * W * 3);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = (std::clamp(static_cast<double>(img.data(c, y, x)), -1.0, 1.0) + 1.0) * 0.5;
        px[(static_cast<std::size_t>(y) * W + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
  write_png(path, W, H, 3, px);
}

/// [0, 255] -> [-1, 1]; grayscale inputs are replicated to three channels.
inline PixelImage read_rgb_png(const std::filesystem::path& path) {
  const auto png = read_png(path);
  PixelImage img{Tensor<float>(3, png.height, png.width)};
  for (int y = 0; y < png.height; ++y)
    for (int x = 0; x < png.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const int src = png.channels >= 3 ? c : 0;
        const auto v = png.pixels[(static_cast<std::size_t>(y) * png.width + x) * png.channels + src];
        img.data(c, y, x) = static_cast<float>(v / 255.0 * 2.0 - 1.0);
      }
  return img;
}

/// Min-max stretched grayscale preview (near = bright).
inline void write_depth_preview(const std::filesystem::path& path, const DepthMap& d) {
  double lo = INFINITY, hi = -INFINITY;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (d.valid[i]) lo = std::min(lo, d.data[i]), hi = std::max(hi, d.data[i]);
  const double span = hi > lo ? hi - lo : 1.0;
  std::vector<std::uint8_t> px(d.size());
  for (std::size_t i = 0; i < d.size(); ++i)
    px[i] = d.valid[i] ? static_cast<std::uint8_t>(std::lround(255.0 * (hi - d.data[i]) / span)) : 0;
  write_png(path, d.width(), d.height(), 1, px);
}

}  // namespace fiffdepth
