#include "advmesh/boxes.hpp"

#include <algorithm>
#include <cmath>

namespace advmesh {

double iou_2d(const Box2D& a, const Box2D& b) {
  const double iw = std::min(a.right, b.right) - std::max(a.left, b.left);
  const double ih = std::min(a.bottom, b.bottom) - std::max(a.top, b.top);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

double wrap_angle(double a) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  a = std::fmod(a, two_pi);
  if (a <= -std::numbers::pi) a += two_pi;
  if (a > std::numbers::pi) a -= two_pi;
  return a;
}

std::array<std::array<double, 2>, 4> Box3D::bev_corners() const {
  const double c = std::cos(yaw), s = std::sin(yaw);
  const double hl = 0.5 * length, hw = 0.5 * width;
  const std::array<std::array<double, 2>, 4> local{{{hl, -hw}, {hl, hw}, {-hl, hw}, {-hl, -hw}}};
  std::array<std::array<double, 2>, 4> out{};
  for (int i = 0; i < 4; ++i) {
    out[i] = {center.x + c * local[i][0] - s * local[i][1],
              center.y + s * local[i][0] + c * local[i][1]};
  }
  return out;
}

std::array<Vec3, 8> Box3D::corners() const {
  const auto bev = bev_corners();
  std::array<Vec3, 8> out;
  for (int i = 0; i < 4; ++i) {
    out[i] = {bev[i][0], bev[i][1], bottom_z()};
    out[i + 4] = {bev[i][0], bev[i][1], top_z()};
  }
  return out;
}

bool Box3D::contains(const Vec3& p, double margin) const {
  const double c = std::cos(yaw), s = std::sin(yaw);
  const Vec3 d = p - center;
  const double lx = c * d.x + s * d.y;
  const double ly = -s * d.x + c * d.y;
  return std::abs(lx) <= 0.5 * length + margin && std::abs(ly) <= 0.5 * width + margin &&
         std::abs(d.z) <= 0.5 * height + margin;
}

}  // namespace advmesh
