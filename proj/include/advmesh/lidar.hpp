#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "advmesh/geometry.hpp"
#include "advmesh/vec.hpp"

namespace advmesh {

// Sensor-frame point cloud; intensity is the KITTI reflectance channel.
struct PointCloud {
  std::vector<Vec3> points;
  std::vector<float> intensity;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  void push_back(const Vec3& p, float reflectance) {
    points.push_back(p);
    intensity.push_back(reflectance);
  }
};

inline constexpr float kRenderedReflectance = 0.5f;

struct LidarConfig {
  std::vector<double> elevations;  // radians, strictly increasing
  double azimuth_step = 0.0;       // radians
  double azimuth_start = 0.0;
  double azimuth_end = 0.0;
  Vec3 origin;
  double noise_std = 0.02;  // meters, along the ray
  double max_range = 120.0;
  std::uint64_t seed = 0;

  // 64 beams spread uniformly over [-24.8, +2.0] degrees, 0.17 degree
  // azimuth step over the full circle; an approximation of the KITTI sensor.
  static LidarConfig kitti_default();
  void validate() const;
  std::size_t azimuth_count() const;
  std::size_t ray_count() const { return elevations.size() * azimuth_count(); }
};

struct Ray {
  Vec3 origin;
  Vec3 direction;
};

struct Intersection {
  double t = 0.0;
  double u = 0.0;  // weight of v1
  double v = 0.0;  // weight of v2
};

// Noiseless geometry of one kept return; `point` is origin + t * direction.
struct HitRecord {
  std::size_t ray_id = 0;
  std::size_t face_id = 0;
  double t = 0.0;
  double u = 0.0;
  double v = 0.0;
  Vec3 point;
  Ray ray;
};

struct LidarRender {
  PointCloud cloud;  // cloud.points[i] comes from hits[i] plus range noise
  std::vector<HitRecord> hits;
};

enum class RayCulling {
  None,           // every ray against every face
  BoundingSphere  // only rays that can reach the mesh's bounding sphere
};

inline constexpr double kMinHitDistance = 1e-6;
inline constexpr double kParallelDeterminant = 1e-12;

Ray make_ray(const LidarConfig& cfg, std::size_t elevation_index, std::size_t azimuth_index);
std::vector<Ray> generate_rays(const LidarConfig& cfg);

std::optional<Intersection> moller_trumbore(const Ray& ray, const Vec3& v0, const Vec3& v1,
                                            const Vec3& v2);

// Nearest hit along every ray, at most one return per ray, ordered by ray id.
LidarRender render_lidar(const TriMesh& mesh, const LidarConfig& cfg,
                         RayCulling culling = RayCulling::BoundingSphere);

// Range-noise draw for a ray; counter-based so it does not depend on the
// order rays are processed in.
double range_noise(std::uint64_t seed, std::size_t ray_id, double stddev);

// Adjoint of the hit points with respect to mesh vertices, holding each
// ray's face assignment fixed. Returns per-vertex gradients.
std::vector<Vec3> lidar_backward(const std::vector<HitRecord>& hits,
                                 const std::vector<Vec3>& point_grads, const TriMesh& mesh);

PointCloud merge_into_scene(const PointCloud& scene, const PointCloud& rendered);

// Drops scene points whose line of sight from `sensor` passes through the mesh.
PointCloud cull_occluded(const PointCloud& scene, const TriMesh& mesh, const Vec3& sensor);

}  // namespace advmesh
