#include "advmesh/lidar.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace advmesh {
namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double to_unit(std::uint64_t x) { return (static_cast<double>(x >> 11) + 0.5) * 0x1.0p-53; }

struct Sphere {
  Vec3 center;
  double radius = 0.0;
};

Sphere bounding_sphere(const TriMesh& mesh) {
  Vec3 lo = mesh.vertices.front(), hi = mesh.vertices.front();
  for (const auto& p : mesh.vertices)
    for (int k = 0; k < 3; ++k) {
      lo[k] = std::min(lo[k], p[k]);
      hi[k] = std::max(hi[k], p[k]);
    }
  Sphere s{0.5 * (lo + hi), 0.0};
  for (const auto& p : mesh.vertices) s.radius = std::max(s.radius, norm(p - s.center));
  s.radius = s.radius * (1.0 + 1e-9) + 1e-9;
  return s;
}

bool ray_reaches_sphere(const Ray& ray, const Sphere& s) {
  const Vec3 oc = s.center - ray.origin;
  const double proj = dot(oc, ray.direction);
  const double dist2 = squared_norm(oc) - proj * proj;
  if (dist2 > s.radius * s.radius) return false;
  return proj >= -s.radius || squared_norm(oc) <= s.radius * s.radius;
}

std::optional<HitRecord> nearest_hit(const TriMesh& mesh, const Ray& ray, double max_range) {
  std::optional<HitRecord> best;
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    const Face& face = mesh.faces[f];
    const auto hit = moller_trumbore(ray, mesh.vertices[face[0]], mesh.vertices[face[1]],
                                     mesh.vertices[face[2]]);
    if (!hit || hit->t > max_range) continue;
    if (!best || hit->t < best->t) {
      best = HitRecord{0, f, hit->t, hit->u, hit->v, ray.origin + hit->t * ray.direction, ray};
    }
  }
  return best;
}

}  // namespace

LidarConfig LidarConfig::kitti_default() {
  LidarConfig cfg;
  const int beams = 64;
  const double lo = -24.8 * kDeg, hi = 2.0 * kDeg;
  for (int i = 0; i < beams; ++i) cfg.elevations.push_back(lo + (hi - lo) * i / (beams - 1));
  cfg.azimuth_step = 0.17 * kDeg;
  cfg.azimuth_start = -std::numbers::pi;
  cfg.azimuth_end = std::numbers::pi;
  return cfg;
}

void LidarConfig::validate() const {
  if (!(azimuth_step > 0.0)) throw std::invalid_argument("lidar azimuth step must be positive");
  if (!(max_range > 0.0)) throw std::invalid_argument("lidar max range must be positive");
  if (!(azimuth_end > azimuth_start)) throw std::invalid_argument("lidar azimuth range is empty");
  if (elevations.empty()) throw std::invalid_argument("lidar needs at least one beam");
  for (std::size_t i = 1; i < elevations.size(); ++i)
    if (!(elevations[i] > elevations[i - 1]))
      throw std::invalid_argument("lidar elevations must be strictly increasing");
  if (!(noise_std >= 0.0)) throw std::invalid_argument("lidar noise must be non-negative");
}

std::size_t LidarConfig::azimuth_count() const {
  return static_cast<std::size_t>(std::ceil((azimuth_end - azimuth_start) / azimuth_step - 1e-9));
}

Ray make_ray(const LidarConfig& cfg, std::size_t elevation_index, std::size_t azimuth_index) {
  const double el = cfg.elevations[elevation_index];
  const double az = cfg.azimuth_start + static_cast<double>(azimuth_index) * cfg.azimuth_step;
  const double ce = std::cos(el);
  return {cfg.origin, Vec3{ce * std::cos(az), ce * std::sin(az), std::sin(el)}};
}

std::vector<Ray> generate_rays(const LidarConfig& cfg) {
  cfg.validate();
  std::vector<Ray> rays;
  rays.reserve(cfg.ray_count());
  const std::size_t n_az = cfg.azimuth_count();
  for (std::size_t e = 0; e < cfg.elevations.size(); ++e)
    for (std::size_t a = 0; a < n_az; ++a) rays.push_back(make_ray(cfg, e, a));
  return rays;
}

std::optional<Intersection> moller_trumbore(const Ray& ray, const Vec3& v0, const Vec3& v1,
                                            const Vec3& v2) {
  const Vec3 e1 = v1 - v0;
  const Vec3 e2 = v2 - v0;
  const Vec3 p = cross(ray.direction, e2);
  const double det = dot(e1, p);
  if (std::abs(det) < kParallelDeterminant) return std::nullopt;
  const double inv_det = 1.0 / det;
  const Vec3 s = ray.origin - v0;
  const double u = dot(s, p) * inv_det;
  if (u < 0.0 || u > 1.0) return std::nullopt;
  const Vec3 q = cross(s, e1);
  const double v = dot(ray.direction, q) * inv_det;
  if (v < 0.0 || u + v > 1.0) return std::nullopt;
  const double t = dot(e2, q) * inv_det;
  if (t <= kMinHitDistance) return std::nullopt;
  return Intersection{t, u, v};
}

double range_noise(std::uint64_t seed, std::size_t ray_id, double stddev) {
  if (stddev == 0.0) return 0.0;
  const std::uint64_t h = splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(ray_id)));
  const double u1 = to_unit(h);
  const double u2 = to_unit(splitmix64(h));
  return stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

LidarRender render_lidar(const TriMesh& mesh, const LidarConfig& cfg, RayCulling culling) {
  cfg.validate();
  LidarRender out;
  if (mesh.faces.empty() || mesh.vertices.empty()) return out;

  const std::size_t n_el = cfg.elevations.size();
  const std::size_t n_az = cfg.azimuth_count();
  std::vector<std::size_t> el_candidates, az_candidates;
  Sphere sphere;
  const bool cull = culling == RayCulling::BoundingSphere;
  bool window = false;
  if (cull) {
    sphere = bounding_sphere(mesh);
    const Vec3 rel = sphere.center - cfg.origin;
    const double dist = norm(rel);
    if (dist > sphere.radius) {
      const double alpha = std::asin(sphere.radius / dist);
      const double el_c = std::asin(std::clamp(rel.z / dist, -1.0, 1.0));
      const double margin = 1e-9;
      const double el_max = std::abs(el_c) + alpha;
      if (el_max < 0.5 * std::numbers::pi) {
        const double s = std::sin(alpha) / std::cos(el_max);
        if (s < 1.0) {
          window = true;
          const double half = std::asin(s) + margin;
          const double az_c = std::atan2(rel.y, rel.x);
          for (std::size_t e = 0; e < n_el; ++e)
            if (std::abs(cfg.elevations[e] - el_c) <= alpha + margin) el_candidates.push_back(e);
          for (std::size_t a = 0; a < n_az; ++a) {
            const double az = cfg.azimuth_start + static_cast<double>(a) * cfg.azimuth_step;
            if (std::abs(wrap_angle(az - az_c)) <= half) az_candidates.push_back(a);
          }
        }
      }
    }
  }
  if (!window) {
    el_candidates.resize(n_el);
    for (std::size_t e = 0; e < n_el; ++e) el_candidates[e] = e;
    az_candidates.resize(n_az);
    for (std::size_t a = 0; a < n_az; ++a) az_candidates[a] = a;
  }

  for (auto e : el_candidates) {
    for (auto a : az_candidates) {
      const Ray ray = make_ray(cfg, e, a);
      if (cull && !ray_reaches_sphere(ray, sphere)) continue;
      auto hit = nearest_hit(mesh, ray, cfg.max_range);
      if (!hit) continue;
      hit->ray_id = e * n_az + a;
      const double noisy_t = hit->t + range_noise(cfg.seed, hit->ray_id, cfg.noise_std);
      out.cloud.push_back(ray.origin + noisy_t * ray.direction, kRenderedReflectance);
      out.hits.push_back(*hit);
    }
  }
  return out;
}

std::vector<Vec3> lidar_backward(const std::vector<HitRecord>& hits,
                                 const std::vector<Vec3>& point_grads, const TriMesh& mesh) {
  if (point_grads.size() != hits.size()) {
    throw std::invalid_argument("lidar_backward: one gradient per hit is required");
  }
  std::vector<Vec3> grad(mesh.vertices.size());
  for (std::size_t h = 0; h < hits.size(); ++h) {
    const HitRecord& hit = hits[h];
    if (hit.face_id >= mesh.faces.size()) {
      throw std::invalid_argument("lidar_backward: hit references face " +
                                  std::to_string(hit.face_id) + " of a mesh with " +
                                  std::to_string(mesh.faces.size()));
    }
    const double gd = dot(point_grads[h], hit.ray.direction);
    if (gd == 0.0) continue;
    const Face& f = mesh.faces[hit.face_id];
    const Vec3& v0 = mesh.vertices[f[0]];
    const Vec3 e1 = mesh.vertices[f[1]] - v0;
    const Vec3 e2 = mesh.vertices[f[2]] - v0;
    const Vec3 n = cross(e1, e2);
    const double denom = dot(n, hit.ray.direction);
    // t = n.(v0 - o) / n.d, so dt = [dn.(v0 - p) + n.dv0] / n.d
    const Vec3 w = v0 - hit.point;
    const Vec3 dt_dv1 = cross(e2, w) / denom;
    const Vec3 dt_dv2 = cross(w, e1) / denom;
    const Vec3 dt_dv0 = n / denom - dt_dv1 - dt_dv2;
    grad[f[0]] += gd * dt_dv0;
    grad[f[1]] += gd * dt_dv1;
    grad[f[2]] += gd * dt_dv2;
  }
  return grad;
}

PointCloud merge_into_scene(const PointCloud& scene, const PointCloud& rendered) {
  PointCloud out = scene;
  out.points.insert(out.points.end(), rendered.points.begin(), rendered.points.end());
  out.intensity.insert(out.intensity.end(), rendered.intensity.begin(), rendered.intensity.end());
  return out;
}

PointCloud cull_occluded(const PointCloud& scene, const TriMesh& mesh, const Vec3& sensor) {
  if (mesh.faces.empty()) return scene;
  const Sphere sphere = bounding_sphere(mesh);
  PointCloud out;
  for (std::size_t i = 0; i < scene.size(); ++i) {
    const Vec3 delta = scene.points[i] - sensor;
    const double range = norm(delta);
    bool occluded = false;
    if (range > 0.0) {
      const Ray ray{sensor, delta / range};
      if (ray_reaches_sphere(ray, sphere)) {
        const auto hit = nearest_hit(mesh, ray, range);
        occluded = hit.has_value() && hit->t < range - 1e-9;
      }
    }
    if (!occluded) out.push_back(scene.points[i], scene.intensity[i]);
  }
  return out;
}

}  // namespace advmesh
