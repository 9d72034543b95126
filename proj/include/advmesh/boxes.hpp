#pragma once

#include <array>
#include <numbers>
#include <vector>

#include "advmesh/vec.hpp"

namespace advmesh {

inline constexpr int kCarClass = 0;

// Axis-aligned image box in pixels with an objectness score.
struct Box2D {
  double left = 0.0;
  double top = 0.0;
  double right = 0.0;
  double bottom = 0.0;
  double score = 1.0;
  int class_id = kCarClass;

  double width() const { return right - left; }
  double height() const { return bottom - top; }
  double area() const { return width() > 0 && height() > 0 ? width() * height() : 0.0; }
  bool valid() const { return left < right && top < bottom && score >= 0.0 && score <= 1.0; }
};

double iou_2d(const Box2D& a, const Box2D& b);

// Oriented box in the z-up sensor frame. `center` is the geometric center,
// dimensions follow the KITTI (height, width, length) order and the length
// axis points along `yaw`.
struct Box3D {
  Vec3 center;
  double height = 1.0;
  double width = 1.0;
  double length = 1.0;
  double yaw = 0.0;

  bool valid() const { return height > 0 && width > 0 && length > 0; }
  double volume() const { return height * width * length; }
  double bottom_z() const { return center.z - 0.5 * height; }
  double top_z() const { return center.z + 0.5 * height; }
  // Ground-plane footprint corners, counter-clockwise.
  std::array<std::array<double, 2>, 4> bev_corners() const;
  // All eight corners: the four bottom ones first, both rings in bev order.
  std::array<Vec3, 8> corners() const;
  bool contains(const Vec3& p, double margin = 0.0) const;
};

// Wraps an angle into (-pi, pi].
double wrap_angle(double a);

}  // namespace advmesh
