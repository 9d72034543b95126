#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "advmesh/boxes.hpp"
#include "advmesh/vec.hpp"

namespace advmesh {

using Face = std::array<std::uint32_t, 3>;
using Edge = std::pair<std::uint32_t, std::uint32_t>;

// Triangle mesh with one RGB color in [0,1] per vertex.
struct TriMesh {
  std::vector<Vec3> vertices;
  std::vector<Face> faces;
  std::vector<Vec3> colors;

  std::size_t vertex_count() const { return vertices.size(); }
  std::size_t face_count() const { return faces.size(); }
  // Throws std::invalid_argument when an index or color invariant is broken.
  void validate() const;
};

// Per-vertex offsets applied in the mesh's local frame.
using Displacement = std::vector<Vec3>;

// Rotation about the vertical axis followed by a translation.
struct RigidTransform {
  Mat3 rotation;
  Vec3 translation;

  static RigidTransform identity() { return {}; }
  static RigidTransform from_yaw(double yaw, const Vec3& translation);

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
  Vec3 apply_direction(const Vec3& d) const { return rotation * d; }
  RigidTransform inverse() const;
  // Homogeneous 4x4 matrix, row-major.
  std::array<double, 16> matrix() const;
};

struct Extents {
  double x = 0.8;
  double y = 0.8;
  double z = 0.8;
};

TriMesh make_icosphere(int subdivisions, double radius);

std::vector<Edge> unique_edges(const TriMesh& mesh);
std::vector<std::vector<std::uint32_t>> vertex_neighbors(const TriMesh& mesh);
// V - E + F.
long euler_characteristic(const TriMesh& mesh);

// v_i = T (v_i^0 + d_i); faces and colors are copied from `base`.
TriMesh apply_deformation(const TriMesh& base, const Displacement& d, const RigidTransform& t);
// Adjoint of apply_deformation with respect to the displacement: accumulates
// R^T g_i into `disp_grad`.
void deformation_backward(const RigidTransform& t, const std::vector<Vec3>& vertex_grad,
                          std::vector<Vec3>& disp_grad);

std::vector<Vec3> laplacian_deltas(const TriMesh& mesh);
double laplacian_loss(const TriMesh& mesh);
// Gradient of laplacian_loss with respect to vertex positions.
std::vector<Vec3> laplacian_loss_grad(const TriMesh& mesh);

// Clamps every coordinate of base + d to the box [-limits/2, +limits/2].
// Coordinates already inside keep their displacement bit-identical.
Displacement clamp_extents(const Displacement& d, const TriMesh& base, const Extents& limits);
Extents bounding_extents(const std::vector<Vec3>& points);

// Places the mesh origin `clearance` meters above the roof center of `car`,
// rotated to the car's heading.
RigidTransform roof_pose(const Box3D& car, double clearance);

}  // namespace advmesh
