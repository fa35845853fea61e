#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "roadinv/tensor.hpp"

namespace roadinv {

struct ImageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Reads any PNG as [3,H,W] doubles in [0,1] (libpng converts to 8-bit RGB).
inline Tensor read_png(const std::filesystem::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw ImageError("cannot read png " + path.string() + ": " + img.message);
  img.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> raw(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, raw.data(), 0, nullptr)) {
    png_image_free(&img);
    throw ImageError("cannot decode png " + path.string() + ": " + img.message);
  }
  const int h = static_cast<int>(img.height), w = static_cast<int>(img.width);
  Tensor t({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        t.at(c, y, x) = raw[(static_cast<std::size_t>(y) * w + x) * 3 + c] / 255.0;
  return t;
}

inline void write_png(const Tensor& t, const std::filesystem::path& path) {
  if (t.rank() != 3 || t.extent(0) != 3) throw ImageError("write_png: expects [3,H,W]");
  const int h = t.extent(1), w = t.extent(2);
  std::vector<std::uint8_t> raw(static_cast<std::size_t>(h) * w * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(t.at(c, y, x), 0.0, 1.0);
        raw[(static_cast<std::size_t>(y) * w + x) * 3 + c] =
            static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(w);
  img.height = static_cast<png_uint_32>(h);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, raw.data(), 0, nullptr))
    throw ImageError("cannot write png " + path.string() + ": " + img.message);
}

// Bilinear resize to side x side. Same-size input is passed through
// untouched so already-sized datasets stay bit-exact.
inline Tensor resize_bilinear(const Tensor& src, int side) {
  if (src.rank() != 3) throw ImageError("resize: expects [C,H,W]");
  const int c = src.extent(0), h = src.extent(1), w = src.extent(2);
  if (h == side && w == side) return src;
  if (side < 1) throw ImageError("resize: bad target side");
  Tensor dst({c, side, side});
  const double sy = static_cast<double>(h) / side;
  const double sx = static_cast<double>(w) / side;
  for (int y = 0; y < side; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, h - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - y0;
    for (int x = 0; x < side; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, w - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - x0;
      for (int ch = 0; ch < c; ++ch) {
        const double top = src.at(ch, y0, x0) * (1 - wx) + src.at(ch, y0, x1) * wx;
        const double bot = src.at(ch, y1, x0) * (1 - wx) + src.at(ch, y1, x1) * wx;
        dst.at(ch, y, x) = top * (1 - wy) + bot * wy;
      }
    }
  }
  return dst;
}

}  // namespace roadinv
