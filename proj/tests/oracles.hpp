#pragma once

// Independent reference computations and random generators shared by the
// unit tests and the acceptance binary. Nothing here calls the code under test.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <vector>

#include "advmesh/boxes.hpp"
#include "advmesh/geometry.hpp"
#include "advmesh/lidar.hpp"

namespace oracle {

using advmesh::Box3D;
using advmesh::Vec3;

class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  double normal(double sd = 1.0) { return std::normal_distribution<double>(0.0, sd)(rng_); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }
  bool coin(double p = 0.5) { return uniform(0.0, 1.0) < p; }
  Vec3 vec(double lo, double hi) { return {uniform(lo, hi), uniform(lo, hi), uniform(lo, hi)}; }
  Vec3 unit() {
    Vec3 v{normal(), normal(), normal()};
    const double n = std::sqrt(v.x * v.x + v.y * v.y + v.z * v.z);
    return v / n;
  }
  Box3D box(double spread = 5.0) {
    Box3D b;
    b.center = {uniform(-spread, spread), uniform(-spread, spread), uniform(-1.0, 1.0)};
    b.length = uniform(0.5, 5.0);
    b.width = uniform(0.5, 3.0);
    b.height = uniform(0.5, 2.5);
    b.yaw = uniform(-3.14159, 3.14159);
    return b;
  }
  std::mt19937_64& engine() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

// Intersects the ray with the triangle's plane, then tests the hit point with
// signed sub-triangle areas. Returns (t, weight of v1, weight of v2).
inline std::optional<std::array<double, 3>> plane_clip_hit(const advmesh::Ray& ray, const Vec3& a, const Vec3& b,
                                                           const Vec3& c, double t_min = 1e-6) {
  const Vec3 n = advmesh::cross(b - a, c - a);
  const double denom = advmesh::dot(n, ray.direction);
  if (std::abs(denom) < 1e-12) return std::nullopt;
  const double t = advmesh::dot(n, a - ray.origin) / denom;
  if (!(t > t_min)) return std::nullopt;
  const Vec3 p = ray.origin + t * ray.direction;
  const double total = advmesh::dot(n, n);
  const double wa = advmesh::dot(advmesh::cross(b - p, c - p), n) / total;
  const double wb = advmesh::dot(advmesh::cross(c - p, a - p), n) / total;
  const double wc = advmesh::dot(advmesh::cross(a - p, b - p), n) / total;
  if (wa < 0.0 || wb < 0.0 || wc < 0.0) return std::nullopt;
  return std::array<double, 3>{t, wb, wc};
}

// Nearest plane-clip hit over every face of a mesh.
inline std::optional<double> nearest_hit_t(const advmesh::Ray& ray, const advmesh::TriMesh& mesh) {
  std::optional<double> best;
  for (const auto& f : mesh.faces) {
    const auto h = plane_clip_hit(ray, mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]);
    if (h && (!best || (*h)[0] < *best)) best = (*h)[0];
  }
  return best;
}

inline bool inside_bev(const Box3D& b, double x, double y) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double dx = x - b.center.x, dy = y - b.center.y;
  const double a = c * dx + s * dy, w = -s * dx + c * dy;
  return std::abs(a) <= 0.5 * b.length && std::abs(w) <= 0.5 * b.width;
}

// Monte-Carlo BEV intersection area over the bounding square of both boxes.
inline double mc_bev_intersection(const Box3D& a, const Box3D& b, int samples, std::uint64_t seed) {
  const double ra = 0.5 * std::hypot(a.length, a.width), rb = 0.5 * std::hypot(b.length, b.width);
  const double x0 = std::min(a.center.x - ra, b.center.x - rb), x1 = std::max(a.center.x + ra, b.center.x + rb);
  const double y0 = std::min(a.center.y - ra, b.center.y - rb), y1 = std::max(a.center.y + ra, b.center.y + rb);
  Gen g(seed);
  int hits = 0;
  for (int i = 0; i < samples; ++i) {
    const double x = g.uniform(x0, x1), y = g.uniform(y0, y1);
    if (inside_bev(a, x, y) && inside_bev(b, x, y)) ++hits;
  }
  return (x1 - x0) * (y1 - y0) * hits / samples;
}

inline double mc_iou_bev(const Box3D& a, const Box3D& b, int samples, std::uint64_t seed) {
  const double inter = mc_bev_intersection(a, b, samples, seed);
  return inter / (a.length * a.width + b.length * b.width - inter);
}

// Interpolated AP from an explicit ranked list of outcomes: for each recall
// sample r, the best precision at any prefix whose recall reaches r.
struct Outcome {
  double score;
  bool true_positive;
};

inline double enumerate_ap(std::vector<Outcome> ranked, int num_gt, int recall_points) {
  if (num_gt == 0) return 0.0;
  std::stable_sort(ranked.begin(), ranked.end(), [](const Outcome& a, const Outcome& b) { return a.score > b.score; });
  std::vector<double> recalls, precisions;
  int tp = 0;
  for (std::size_t k = 0; k < ranked.size(); ++k) {
    tp += ranked[k].true_positive ? 1 : 0;
    recalls.push_back(double(tp) / num_gt);
    precisions.push_back(double(tp) / double(k + 1));
  }
  std::vector<double> samples;
  if (recall_points == 11)
    for (int i = 0; i <= 10; ++i) samples.push_back(i / 10.0);
  else
    for (int i = 1; i <= recall_points; ++i) samples.push_back(double(i) / recall_points);
  double sum = 0.0;
  for (double r : samples) {
    double best = 0.0;
    for (std::size_t k = 0; k < recalls.size(); ++k)
      if (recalls[k] >= r - 1e-12) best = std::max(best, precisions[k]);
    sum += best;
  }
  return sum / samples.size();
}

// Central differences of f along every coordinate of x.
inline std::vector<double> central_diff(const std::function<double(const std::vector<double>&)>& f,
                                        std::vector<double> x, double eps) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + eps;
    const double fp = f(x);
    x[i] = keep - eps;
    const double fm = f(x);
    x[i] = keep;
    g[i] = (fp - fm) / (2.0 * eps);
  }
  return g;
}

inline double rel_error(double a, double n) { return std::abs(a - n) / std::max({1.0, std::abs(a), std::abs(n)}); }

inline double max_rel_error(const std::vector<double>& a, const std::vector<double>& n) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, rel_error(a[i], n[i]));
  return worst;
}

// Row-major 3x3 product written out longhand.
inline Vec3 rotate_z_by_hand(double angle, const Vec3& p) {
  const double c = std::cos(angle), s = std::sin(angle);
  return {c * p.x - s * p.y, s * p.x + c * p.y, p.z};
}

}  // namespace oracle
