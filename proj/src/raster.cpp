#include "advmesh/raster.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace advmesh {

PixelProjection project(const CameraModel& cam, const Vec3& p) {
  const auto& m = cam.projection;
  const double x = m[0] * p.x + m[1] * p.y + m[2] * p.z + m[3];
  const double y = m[4] * p.x + m[5] * p.y + m[6] * p.z + m[7];
  const double w = m[8] * p.x + m[9] * p.y + m[10] * p.z + m[11];
  if (!(w > 0.0)) throw BehindCamera("point projects with non-positive depth");
  return {x / w, y / w, w};
}

RasterResult rasterize(const TriMesh& mesh, const CameraModel& cam, const Image& background) {
  if (background.width != cam.width || background.height != cam.height) {
    throw std::invalid_argument("rasterize: background size does not match camera");
  }
  const int w = cam.width, h = cam.height;
  const std::size_t npix = static_cast<std::size_t>(w) * h;
  std::vector<double> zbuf(npix, std::numeric_limits<double>::infinity());
  std::vector<CoverageSample> buffer(npix);
  std::vector<bool> covered(npix, false);

  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    const Face& face = mesh.faces[f];
    std::array<PixelProjection, 3> p;
    bool usable = true;
    for (int k = 0; k < 3; ++k) {
      const Vec3& v = mesh.vertices[face[k]];
      const auto& m = cam.projection;
      const double depth = m[8] * v.x + m[9] * v.y + m[10] * v.z + m[11];
      if (!(depth > kNearPlane)) {
        usable = false;
        break;
      }
      p[k] = project(cam, v);
    }
    if (!usable) continue;

    const double area = (p[1].u - p[0].u) * (p[2].v - p[0].v) - (p[2].u - p[0].u) * (p[1].v - p[0].v);
    if (std::abs(area) < 1e-12) continue;
    const double umin = std::min({p[0].u, p[1].u, p[2].u});
    const double umax = std::max({p[0].u, p[1].u, p[2].u});
    const double vmin = std::min({p[0].v, p[1].v, p[2].v});
    const double vmax = std::max({p[0].v, p[1].v, p[2].v});
    const int x0 = std::max(0, static_cast<int>(std::ceil(umin - 0.5)));
    const int x1 = std::min(w - 1, static_cast<int>(std::floor(umax - 0.5)));
    const int y0 = std::max(0, static_cast<int>(std::ceil(vmin - 0.5)));
    const int y1 = std::min(h - 1, static_cast<int>(std::floor(vmax - 0.5)));
    for (int y = y0; y <= y1; ++y) {
      const double py = y + 0.5;
      for (int x = x0; x <= x1; ++x) {
        const double px = x + 0.5;
        // Screen-space barycentrics via edge functions.
        const double l0 = ((p[1].u - px) * (p[2].v - py) - (p[2].u - px) * (p[1].v - py)) / area;
        const double l1 = ((p[2].u - px) * (p[0].v - py) - (p[0].u - px) * (p[2].v - py)) / area;
        const double l2 = 1.0 - l0 - l1;
        if (l0 < 0.0 || l1 < 0.0 || l2 < 0.0) continue;
        const double q0 = l0 / p[0].depth, q1 = l1 / p[1].depth, q2 = l2 / p[2].depth;
        const double inv = q0 + q1 + q2;
        const double depth = 1.0 / inv;
        const std::size_t idx = static_cast<std::size_t>(y) * w + x;
        if (!(depth < zbuf[idx])) continue;
        zbuf[idx] = depth;
        covered[idx] = true;
        auto& s = buffer[idx];
        s.pixel = idx;
        s.face = static_cast<std::uint32_t>(f);
        s.vertex = face;
        s.weights = {q0 * depth, q1 * depth, q2 * depth};
        s.depth = depth;
      }
    }
  }

  RasterResult out{background, CoverageMap{w, h, mesh.vertices.size(), {}}};
  for (std::size_t idx = 0; idx < npix; ++idx) {
    if (!covered[idx]) continue;
    auto s = buffer[idx];
    Vec3 color;
    for (int k = 0; k < 3; ++k) color += s.weights[k] * mesh.colors[s.vertex[k]];
    for (int c = 0; c < 3; ++c) {
      const double raw = color[c];
      s.clamped[c] = raw < 0.0 || raw > 1.0;
      out.image.data[idx * 3 + c] = std::clamp(raw, 0.0, 1.0);
    }
    out.coverage.samples.push_back(s);
  }
  return out;
}

std::vector<Vec3> color_backward(const CoverageMap& coverage, const Image& image_grad) {
  if (image_grad.width != coverage.width || image_grad.height != coverage.height) {
    throw std::invalid_argument("color_backward: gradient image size mismatch");
  }
  std::vector<Vec3> grad(coverage.vertex_count);
  for (const auto& s : coverage.samples) {
    for (int c = 0; c < 3; ++c) {
      if (s.clamped[c]) continue;
      const double g = image_grad.data[s.pixel * 3 + c];
      if (g == 0.0) continue;
      for (int k = 0; k < 3; ++k) grad[s.vertex[k]][c] += s.weights[k] * g;
    }
  }
  return grad;
}

}  // namespace advmesh
