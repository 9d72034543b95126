#include "advmesh/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

namespace advmesh {

void TriMesh::validate() const {
  if (colors.size() != vertices.size()) {
    throw std::invalid_argument("mesh has " + std::to_string(colors.size()) + " colors for " +
                                std::to_string(vertices.size()) + " vertices");
  }
  for (std::size_t f = 0; f < faces.size(); ++f) {
    const Face& face = faces[f];
    for (auto idx : face) {
      if (idx >= vertices.size()) {
        throw std::invalid_argument("face " + std::to_string(f) + " references vertex " +
                                    std::to_string(idx));
      }
    }
    if (face[0] == face[1] || face[1] == face[2] || face[0] == face[2]) {
      throw std::invalid_argument("face " + std::to_string(f) + " is degenerate");
    }
  }
}

RigidTransform RigidTransform::from_yaw(double yaw, const Vec3& translation) {
  return {Mat3::rotation_z(yaw), translation};
}

RigidTransform RigidTransform::inverse() const {
  const Mat3 rt = rotation.transposed();
  return {rt, -(rt * translation)};
}

std::array<double, 16> RigidTransform::matrix() const {
  const Mat3& r = rotation;
  return {r(0, 0), r(0, 1), r(0, 2), translation.x, r(1, 0), r(1, 1), r(1, 2), translation.y,
          r(2, 0), r(2, 1), r(2, 2), translation.z, 0.0,     0.0,     0.0,     1.0};
}

TriMesh make_icosphere(int subdivisions, double radius) {
  if (subdivisions < 0 || subdivisions > 6) {
    throw std::invalid_argument("icosphere subdivisions must be in [0, 6], got " +
                                std::to_string(subdivisions));
  }
  if (!(radius > 0.0)) throw std::invalid_argument("icosphere radius must be positive");

  const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Vec3> verts = {{-1, phi, 0}, {1, phi, 0}, {-1, -phi, 0}, {1, -phi, 0},
                             {0, -1, phi}, {0, 1, phi}, {0, -1, -phi}, {0, 1, -phi},
                             {phi, 0, -1}, {phi, 0, 1}, {-phi, 0, -1}, {-phi, 0, 1}};
  for (auto& v : verts) v = normalize(v);
  std::vector<Face> faces = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
                             {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
                             {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
                             {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};

  for (int level = 0; level < subdivisions; ++level) {
    std::map<Edge, std::uint32_t> midpoint_cache;
    auto midpoint = [&](std::uint32_t a, std::uint32_t b) {
      const Edge key = a < b ? Edge{a, b} : Edge{b, a};
      auto it = midpoint_cache.find(key);
      if (it != midpoint_cache.end()) return it->second;
      const auto idx = static_cast<std::uint32_t>(verts.size());
      verts.push_back(normalize(0.5 * (verts[a] + verts[b])));
      midpoint_cache.emplace(key, idx);
      return idx;
    };
    std::vector<Face> next;
    next.reserve(faces.size() * 4);
    for (const Face& f : faces) {
      const auto ab = midpoint(f[0], f[1]);
      const auto bc = midpoint(f[1], f[2]);
      const auto ca = midpoint(f[2], f[0]);
      next.push_back({f[0], ab, ca});
      next.push_back({f[1], bc, ab});
      next.push_back({f[2], ca, bc});
      next.push_back({ab, bc, ca});
    }
    faces = std::move(next);
  }

  TriMesh mesh;
  mesh.vertices.reserve(verts.size());
  for (const auto& v : verts) mesh.vertices.push_back(v * radius);
  mesh.faces = std::move(faces);
  mesh.colors.assign(mesh.vertices.size(), Vec3{0.5, 0.5, 0.5});
  return mesh;
}

std::vector<Edge> unique_edges(const TriMesh& mesh) {
  std::vector<Edge> edges;
  edges.reserve(mesh.faces.size() * 3);
  for (const Face& f : mesh.faces) {
    for (int k = 0; k < 3; ++k) {
      const auto a = f[k], b = f[(k + 1) % 3];
      edges.push_back(a < b ? Edge{a, b} : Edge{b, a});
    }
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  return edges;
}

std::vector<std::vector<std::uint32_t>> vertex_neighbors(const TriMesh& mesh) {
  std::vector<std::vector<std::uint32_t>> nbrs(mesh.vertices.size());
  for (const auto& [a, b] : unique_edges(mesh)) {
    nbrs[a].push_back(b);
    nbrs[b].push_back(a);
  }
  return nbrs;
}

long euler_characteristic(const TriMesh& mesh) {
  return static_cast<long>(mesh.vertices.size()) - static_cast<long>(unique_edges(mesh).size()) +
         static_cast<long>(mesh.faces.size());
}

TriMesh apply_deformation(const TriMesh& base, const Displacement& d, const RigidTransform& t) {
  if (d.size() != base.vertices.size()) {
    throw std::invalid_argument("displacement has " + std::to_string(d.size()) +
                                " entries for " + std::to_string(base.vertices.size()) +
                                " vertices");
  }
  TriMesh out;
  out.faces = base.faces;
  out.colors = base.colors;
  out.vertices.resize(base.vertices.size());
  for (std::size_t i = 0; i < d.size(); ++i) out.vertices[i] = t.apply(base.vertices[i] + d[i]);
  return out;
}

void deformation_backward(const RigidTransform& t, const std::vector<Vec3>& vertex_grad,
                          std::vector<Vec3>& disp_grad) {
  if (vertex_grad.size() != disp_grad.size()) {
    throw std::invalid_argument("deformation_backward: gradient size mismatch");
  }
  const Mat3 rt = t.rotation.transposed();
  for (std::size_t i = 0; i < vertex_grad.size(); ++i) disp_grad[i] += rt * vertex_grad[i];
}

std::vector<Vec3> laplacian_deltas(const TriMesh& mesh) {
  const auto nbrs = vertex_neighbors(mesh);
  std::vector<Vec3> deltas(mesh.vertices.size());
  for (std::size_t i = 0; i < nbrs.size(); ++i) {
    if (nbrs[i].empty()) continue;
    Vec3 centroid;
    for (auto j : nbrs[i]) centroid += mesh.vertices[j];
    deltas[i] = mesh.vertices[i] - centroid / static_cast<double>(nbrs[i].size());
  }
  return deltas;
}

double laplacian_loss(const TriMesh& mesh) {
  double loss = 0.0;
  for (const auto& d : laplacian_deltas(mesh)) loss += squared_norm(d);
  return loss;
}

std::vector<Vec3> laplacian_loss_grad(const TriMesh& mesh) {
  const auto nbrs = vertex_neighbors(mesh);
  const auto deltas = laplacian_deltas(mesh);
  std::vector<Vec3> grad(mesh.vertices.size());
  for (std::size_t i = 0; i < nbrs.size(); ++i) {
    if (nbrs[i].empty()) continue;
    grad[i] += 2.0 * deltas[i];
    const Vec3 share = deltas[i] * (-2.0 / static_cast<double>(nbrs[i].size()));
    for (auto j : nbrs[i]) grad[j] += share;
  }
  return grad;
}

Displacement clamp_extents(const Displacement& d, const TriMesh& base, const Extents& limits) {
  if (d.size() != base.vertices.size()) {
    throw std::invalid_argument("clamp_extents: displacement size mismatch");
  }
  const std::array<double, 3> half{0.5 * limits.x, 0.5 * limits.y, 0.5 * limits.z};
  Displacement out = d;
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (int k = 0; k < 3; ++k) {
      const double p = base.vertices[i][k] + d[i][k];
      if (p > half[k]) {
        out[i][k] = half[k] - base.vertices[i][k];
      } else if (p < -half[k]) {
        out[i][k] = -half[k] - base.vertices[i][k];
      }
    }
  }
  return out;
}

Extents bounding_extents(const std::vector<Vec3>& points) {
  if (points.empty()) return {0.0, 0.0, 0.0};
  Vec3 lo = points.front(), hi = points.front();
  for (const auto& p : points) {
    for (int k = 0; k < 3; ++k) {
      lo[k] = std::min(lo[k], p[k]);
      hi[k] = std::max(hi[k], p[k]);
    }
  }
  return {hi.x - lo.x, hi.y - lo.y, hi.z - lo.z};
}

RigidTransform roof_pose(const Box3D& car, double clearance) {
  const Vec3 origin = car.center + Vec3{0.0, 0.0, 0.5 * car.height + clearance};
  return RigidTransform::from_yaw(car.yaw, origin);
}

}  // namespace advmesh
