#pragma once

#include <filesystem>
#include <vector>

#include "advmesh/vec.hpp"

namespace advmesh {

// Interleaved RGB image with channels in [0,1].
struct Image {
  int width = 0;
  int height = 0;
  std::vector<double> data;

  Image() = default;
  Image(int w, int h, double fill = 0.0)
      : width(w), height(h), data(static_cast<std::size_t>(w) * h * 3, fill) {}

  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
  double& at(int x, int y, int c) { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  double at(int x, int y, int c) const {
    return data[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  Vec3 pixel(int x, int y) const { return {at(x, y, 0), at(x, y, 1), at(x, y, 2)}; }
  void set_pixel(int x, int y, const Vec3& c) {
    at(x, y, 0) = c.x;
    at(x, y, 1) = c.y;
    at(x, y, 2) = c.z;
  }
  friend bool operator==(const Image&, const Image&) = default;
};

// 8-bit RGB PNG.
void write_png(const std::filesystem::path& path, const Image& image);
Image read_png(const std::filesystem::path& path);

// Rounds every channel to the nearest 1/255 step, as a PNG round trip would.
Image quantize_8bit(const Image& image);

}  // namespace advmesh
