#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "advmesh/geometry.hpp"
#include "advmesh/image.hpp"

namespace advmesh {

class BehindCamera : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Pinhole camera: 3x4 row-major projection from camera-frame points to
// homogeneous pixel coordinates.
struct CameraModel {
  std::array<double, 12> projection{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0};
  int width = 0;
  int height = 0;
};

struct PixelProjection {
  double u = 0.0;
  double v = 0.0;
  double depth = 0.0;
};

// Throws BehindCamera when the homogeneous depth is not positive.
PixelProjection project(const CameraModel& cam, const Vec3& p);

struct CoverageSample {
  std::size_t pixel = 0;  // y * width + x
  std::uint32_t face = 0;
  std::array<std::uint32_t, 3> vertex{};
  std::array<double, 3> weights{};  // perspective-correct, sum to 1
  double depth = 0.0;
  std::array<bool, 3> clamped{};  // channel clipped to [0,1]
};

struct CoverageMap {
  int width = 0;
  int height = 0;
  std::size_t vertex_count = 0;
  std::vector<CoverageSample> samples;  // sorted by pixel, one per pixel
};

struct RasterResult {
  Image image;
  CoverageMap coverage;
};

inline constexpr double kNearPlane = 1e-3;

// Z-buffered rasterization with pixel-center sampling. Faces with any vertex
// closer than kNearPlane are skipped rather than clipped; no back-face culling.
RasterResult rasterize(const TriMesh& mesh_in_camera, const CameraModel& cam, const Image& background);

// d(loss)/d(vertex color) given d(loss)/d(pixel); image_grad has the image's shape.
std::vector<Vec3> color_backward(const CoverageMap& coverage, const Image& image_grad);

}  // namespace advmesh
