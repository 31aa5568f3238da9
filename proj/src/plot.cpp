#include "ckd/plot.hpp"

#include <fmt/format.h>
#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "ckd/common.hpp"

namespace ckd {

Canvas::Canvas(int width, int height, Rgb background) : width_(width), height_(height) {
  pixels_.resize(static_cast<std::size_t>(width) * height * 3);
  for (std::size_t i = 0; i < pixels_.size(); i += 3) {
    pixels_[i] = background[0];
    pixels_[i + 1] = background[1];
    pixels_[i + 2] = background[2];
  }
}

void Canvas::set_pixel(int x, int y, Rgb color) {
  if (x < 0 || x >= width_ || y < 0 || y >= height_) return;
  const std::size_t i = (static_cast<std::size_t>(y) * width_ + x) * 3;
  pixels_[i] = color[0];
  pixels_[i + 1] = color[1];
  pixels_[i + 2] = color[2];
}

void Canvas::line(int x0, int y0, int x1, int y1, Rgb color) {
  // Bresenham
  const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  while (true) {
    set_pixel(x0, y0, color);
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

void Canvas::fill_rect(int x0, int y0, int x1, int y1, Rgb color) {
  for (int y = std::min(y0, y1); y <= std::max(y0, y1); ++y) {
    for (int x = std::min(x0, x1); x <= std::max(x0, x1); ++x) set_pixel(x, y, color);
  }
}

void Canvas::marker_circle(int cx, int cy, int radius, Rgb color) {
  for (int y = -radius; y <= radius; ++y) {
    for (int x = -radius; x <= radius; ++x) {
      if (x * x + y * y <= radius * radius) set_pixel(cx + x, cy + y, color);
    }
  }
}

void Canvas::marker_star(int cx, int cy, int radius, Rgb color) {
  for (int i = 0; i < 5; ++i) {
    const double a = -M_PI / 2 + i * 4.0 * M_PI / 5.0;
    const double b = -M_PI / 2 + (i + 1) * 4.0 * M_PI / 5.0;
    line(cx + static_cast<int>(std::lround(radius * std::cos(a))),
         cy + static_cast<int>(std::lround(radius * std::sin(a))),
         cx + static_cast<int>(std::lround(radius * std::cos(b))),
         cy + static_cast<int>(std::lround(radius * std::sin(b))), color);
  }
}

void Canvas::save_png(const std::filesystem::path& path) const {
  write_png_rgb(path, width_, height_, pixels_.data());
}

namespace {

void append_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

void append_chunk(std::vector<std::uint8_t>& out, const char type[4],
                  const std::vector<std::uint8_t>& data) {
  append_u32(out, static_cast<std::uint32_t>(data.size()));
  const std::size_t crc_start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  const auto crc = crc32(0, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start));
  append_u32(out, static_cast<std::uint32_t>(crc));
}

}  // namespace

void write_png_rgb(const std::filesystem::path& path, int width, int height,
                   const std::uint8_t* rgb) {
  // Filter 0 scanlines, one zlib stream.
  std::vector<std::uint8_t> raw;
  raw.reserve(static_cast<std::size_t>(height) * (1 + static_cast<std::size_t>(width) * 3));
  for (int y = 0; y < height; ++y) {
    raw.push_back(0);
    const std::uint8_t* row = rgb + static_cast<std::size_t>(y) * width * 3;
    raw.insert(raw.end(), row, row + static_cast<std::size_t>(width) * 3);
  }
  uLongf comp_size = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> comp(comp_size);
  if (compress2(comp.data(), &comp_size, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK) {
    throw IoError("PNG deflate failed");
  }
  comp.resize(comp_size);

  std::vector<std::uint8_t> png = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  std::vector<std::uint8_t> ihdr;
  append_u32(ihdr, static_cast<std::uint32_t>(width));
  append_u32(ihdr, static_cast<std::uint32_t>(height));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // truecolor
  ihdr.push_back(0);   // compression
  ihdr.push_back(0);   // filter
  ihdr.push_back(0);   // no interlace
  append_chunk(png, "IHDR", ihdr);
  append_chunk(png, "IDAT", comp);
  append_chunk(png, "IEND", {});

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError(fmt::format("cannot write PNG {}", path.string()));
  f.write(reinterpret_cast<const char*>(png.data()), static_cast<std::streamsize>(png.size()));
}

Rgb heat_color(double t) {
  t = std::clamp(t, 0.0, 1.0);
  // dark blue -> cyan -> yellow -> red
  const double r = std::clamp(1.5 * t - 0.25, 0.0, 1.0);
  const double g = std::clamp(t < 0.5 ? 2.0 * t : 2.0 - 2.0 * t + 0.5, 0.0, 1.0);
  const double b = std::clamp(1.0 - 2.0 * t, 0.0, 1.0);
  return {static_cast<std::uint8_t>(std::lround(255 * r)),
          static_cast<std::uint8_t>(std::lround(255 * g)),
          static_cast<std::uint8_t>(std::lround(255 * b))};
}

}  // namespace ckd
