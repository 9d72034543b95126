#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "advmesh/victim.hpp"

namespace advmesh {

SegNet::SegNet(int h, std::uint64_t seed)
    : hidden(h), enc1(3, h), enc2(h, h), cls1(2 * h, h), cls2(h, 2) {
  enc1.init(seed * 5 + 1);
  enc2.init(seed * 5 + 2);
  cls1.init(seed * 5 + 3);
  cls2.init(seed * 5 + 4);
}

void SegNet::zero() {
  for (auto* l : layers()) {
    std::fill(l->w.begin(), l->w.end(), 0.0);
    std::fill(l->b.begin(), l->b.end(), 0.0);
  }
}

SegForward segment(const SegNet& net, std::span<const Vec3> points) {
  SegForward f;
  const std::size_t n = points.size();
  const int h = net.hidden;
  f.input.assign(points.begin(), points.end());
  if (n == 0) return f;
  f.a1.resize(n * h);
  f.a2.resize(n * h);
  f.c1.resize(n * h);
  f.logits.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x[3] = {points[i].x, points[i].y, points[i].z};
    double* a1 = f.a1.data() + i * h;
    double* a2 = f.a2.data() + i * h;
    net.enc1.forward(x, a1);
    for (int k = 0; k < h; ++k) a1[k] = leaky_relu(a1[k], net.leak);
    net.enc2.forward(a1, a2);
    for (int k = 0; k < h; ++k) a2[k] = leaky_relu(a2[k], net.leak);
  }
  f.global.assign(h, 0.0);
  f.argmax.assign(h, 0);
  for (int k = 0; k < h; ++k) {
    double best = f.a2[k];
    std::size_t arg = 0;
    for (std::size_t i = 1; i < n; ++i) {
      if (f.a2[i * h + k] > best) {
        best = f.a2[i * h + k];
        arg = i;
      }
    }
    f.global[k] = best;
    f.argmax[k] = arg;
  }
  std::vector<double> cat(2 * h);
  std::copy(f.global.begin(), f.global.end(), cat.begin() + h);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(f.a2.data() + i * h, h, cat.begin());
    double* c1 = f.c1.data() + i * h;
    net.cls1.forward(cat.data(), c1);
    for (int k = 0; k < h; ++k) c1[k] = leaky_relu(c1[k], net.leak);
    net.cls2.forward(c1, f.logits[i].data());
  }
  return f;
}

std::vector<Vec3> segment_backward(const SegNet& net, const SegForward& f, std::span<const Logits> logit_grads,
                                   SegNet* grads) {
  const std::size_t n = f.input.size();
  const int h = net.hidden;
  std::vector<Vec3> dx(n);
  if (n == 0) return dx;
  auto act = [&](double post) { return post > 0.0 ? 1.0 : net.leak; };

  std::vector<double> da2(n * h, 0.0), dglobal(h, 0.0);
  std::vector<double> cat(2 * h), dcat(2 * h), dc1(h);
  std::copy(f.global.begin(), f.global.end(), cat.begin() + h);
  for (std::size_t i = 0; i < n; ++i) {
    const double* c1 = f.c1.data() + i * h;
    std::fill(dc1.begin(), dc1.end(), 0.0);
    net.cls2.backward(c1, logit_grads[i].data(), dc1.data(), grads ? &grads->cls2 : nullptr);
    for (int k = 0; k < h; ++k) dc1[k] *= act(c1[k]);
    std::copy_n(f.a2.data() + i * h, h, cat.begin());
    std::fill(dcat.begin(), dcat.end(), 0.0);
    net.cls1.backward(cat.data(), dc1.data(), dcat.data(), grads ? &grads->cls1 : nullptr);
    for (int k = 0; k < h; ++k) {
      da2[i * h + k] += dcat[k];
      dglobal[k] += dcat[h + k];
    }
  }
  for (int k = 0; k < h; ++k) da2[f.argmax[k] * h + k] += dglobal[k];

  std::vector<double> da1(h);
  for (std::size_t i = 0; i < n; ++i) {
    const double* a1 = f.a1.data() + i * h;
    double* d2 = da2.data() + i * h;
    for (int k = 0; k < h; ++k) d2[k] *= act(f.a2[i * h + k]);
    std::fill(da1.begin(), da1.end(), 0.0);
    net.enc2.backward(a1, d2, da1.data(), grads ? &grads->enc2 : nullptr);
    for (int k = 0; k < h; ++k) da1[k] *= act(a1[k]);
    const double x[3] = {f.input[i].x, f.input[i].y, f.input[i].z};
    double g[3] = {0.0, 0.0, 0.0};
    net.enc1.backward(x, da1.data(), g, grads ? &grads->enc1 : nullptr);
    dx[i] = {g[0], g[1], g[2]};
  }
  return dx;
}

double car_probability(const Logits& l) { return 1.0 / (1.0 + std::exp(l[0] - l[1])); }

bool is_car(const Logits& l) { return l[1] >= l[0]; }

Frustum extract_frustum(const PointCloud& cloud, const Box2D& box, const Calibration& calib,
                        const CameraModel& cam) {
  Frustum f;
  f.box = box;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto px = calib.velo_to_pixel(cloud.points[i], cam);
    if (!px || px->depth <= 0.0) continue;
    if (px->u >= box.left && px->u < box.right && px->v >= box.top && px->v < box.bottom) f.indices.push_back(i);
  }
  Vec3 sum;
  for (auto i : f.indices) sum += cloud.points[i];
  if (!f.indices.empty()) f.centroid = sum / static_cast<double>(f.indices.size());
  f.points.reserve(f.indices.size());
  for (auto i : f.indices) f.points.push_back(cloud.points[i] - f.centroid);
  return f;
}

Frustum sample_frustum(const Frustum& f, const PointCloud& cloud, std::size_t max_points, std::uint64_t seed) {
  if (f.indices.size() <= max_points) return f;
  std::vector<std::size_t> order(f.indices.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < max_points; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, order.size() - 1);
    std::swap(order[i], order[pick(rng)]);
  }
  order.resize(max_points);
  std::sort(order.begin(), order.end());
  Frustum out;
  out.box = f.box;
  for (auto k : order) out.indices.push_back(f.indices[k]);
  Vec3 sum;
  for (auto i : out.indices) sum += cloud.points[i];
  out.centroid = sum / static_cast<double>(out.indices.size());
  for (auto i : out.indices) out.points.push_back(cloud.points[i] - out.centroid);
  return out;
}

std::optional<Box3D> estimate_box(const Frustum& frustum, const std::vector<bool>& car_mask) {
  std::vector<Vec3> pts;
  for (std::size_t i = 0; i < frustum.points.size(); ++i)
    if (i < car_mask.size() && car_mask[i]) pts.push_back(frustum.points[i]);
  if (pts.size() < kMinBoxPoints) return std::nullopt;

  // Single-linkage clustering; keep the largest component, earliest on ties.
  std::vector<std::size_t> parent(pts.size());
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t i) {
    while (parent[i] != i) i = parent[i] = parent[parent[i]];
    return i;
  };
  const double r2 = kClusterRadius * kClusterRadius;
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t j = i + 1; j < pts.size(); ++j) {
      const Vec3 d = pts[i] - pts[j];
      if (dot(d, d) <= r2) {
        const std::size_t a = find(i), b = find(j);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
      }
    }
  std::vector<std::size_t> count(pts.size(), 0);
  for (std::size_t i = 0; i < pts.size(); ++i) ++count[find(i)];
  const std::size_t best = std::size_t(std::max_element(count.begin(), count.end()) - count.begin());
  if (count[best] < kMinBoxPoints) return std::nullopt;
  std::vector<Vec3> kept;
  for (std::size_t i = 0; i < pts.size(); ++i)
    if (find(i) == best) kept.push_back(pts[i]);
  pts = std::move(kept);

  Vec3 mean;
  for (const auto& p : pts) mean += p;
  mean = mean / static_cast<double>(pts.size());
  double sxx = 0, syy = 0, sxy = 0;
  for (const auto& p : pts) {
    const double dx = p.x - mean.x, dy = p.y - mean.y;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  const double yaw = 0.5 * std::atan2(2.0 * sxy, sxx - syy);
  const double c = std::cos(yaw), s = std::sin(yaw);
  double lo_a = 1e300, hi_a = -1e300, lo_b = 1e300, hi_b = -1e300, lo_z = 1e300, hi_z = -1e300;
  for (const auto& p : pts) {
    const double dx = p.x - mean.x, dy = p.y - mean.y;
    const double a = c * dx + s * dy, b = -s * dx + c * dy;
    lo_a = std::min(lo_a, a);
    hi_a = std::max(hi_a, a);
    lo_b = std::min(lo_b, b);
    hi_b = std::max(hi_b, b);
    lo_z = std::min(lo_z, p.z);
    hi_z = std::max(hi_z, p.z);
  }
  constexpr double kMinExtent = 1e-3;
  Box3D box;
  const double ma = 0.5 * (lo_a + hi_a), mb = 0.5 * (lo_b + hi_b);
  box.center = Vec3{mean.x + c * ma - s * mb, mean.y + s * ma + c * mb, 0.5 * (lo_z + hi_z)} + frustum.centroid;
  box.length = std::max(hi_a - lo_a, kMinExtent);
  box.width = std::max(hi_b - lo_b, kMinExtent);
  box.height = std::max(hi_z - lo_z, kMinExtent);
  box.yaw = wrap_angle(yaw);
  return box;
}

}  // namespace advmesh
