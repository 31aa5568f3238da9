#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace ckd {

using Rgb = std::array<std::uint8_t, 3>;

/// Raster canvas with just enough drawing for the analysis exports.
class Canvas {
 public:
  Canvas(int width, int height, Rgb background = {255, 255, 255});

  int width() const { return width_; }
  int height() const { return height_; }

  void set_pixel(int x, int y, Rgb color);
  void line(int x0, int y0, int x1, int y1, Rgb color);
  void fill_rect(int x0, int y0, int x1, int y1, Rgb color);
  void marker_circle(int cx, int cy, int radius, Rgb color);
  void marker_star(int cx, int cy, int radius, Rgb color);

  void save_png(const std::filesystem::path& path) const;

 private:
  int width_, height_;
  std::vector<std::uint8_t> pixels_;  // RGB8 rows
};

void write_png_rgb(const std::filesystem::path& path, int width, int height,
                   const std::uint8_t* rgb);

/// Blue-to-red heat ramp for t in [0,1].
Rgb heat_color(double t);

}  // namespace ckd
