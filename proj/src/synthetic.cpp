#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include "advmesh/dataio.hpp"

namespace advmesh {
namespace {

struct Obstacle {
  Box3D box;
  Vec3 color;
  bool is_car = false;
};

std::uint64_t scene_seed(std::uint64_t seed, int index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), 0x5eedu};
  std::uint64_t out = 0;
  std::array<std::uint32_t, 2> words{};
  seq.generate(words.begin(), words.end());
  out = (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
  return out;
}

double round_to_float(double v) { return static_cast<double>(static_cast<float>(v)); }

// Slab test of the segment a->b against an oriented box.
bool segment_hits_box(const Vec3& a, const Vec3& b, const Box3D& box) {
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  auto to_local = [&](const Vec3& p) {
    const Vec3 d = p - box.center;
    return Vec3{c * d.x + s * d.y, -s * d.x + c * d.y, d.z};
  };
  const Vec3 la = to_local(a), lb = to_local(b);
  const Vec3 dir = lb - la;
  const std::array<double, 3> half{0.5 * box.length, 0.5 * box.width, 0.5 * box.height};
  double t0 = 0.0, t1 = 1.0;
  for (int k = 0; k < 3; ++k) {
    if (std::abs(dir[k]) < 1e-15) {
      if (std::abs(la[k]) > half[k]) return false;
      continue;
    }
    double ta = (-half[k] - la[k]) / dir[k];
    double tb = (half[k] - la[k]) / dir[k];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
    if (t0 > t1) return false;
  }
  return true;
}

// Points on the four sides and the top of a box, with uniform per-coordinate jitter.
void sample_shell(const Box3D& box, double density, double jitter, std::mt19937_64& rng, PointCloud& out) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> jit(-jitter, jitter);
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  const double hl = 0.5 * box.length, hw = 0.5 * box.width, hh = 0.5 * box.height;
  struct Patch {
    Vec3 origin, du, dv;
  };
  const std::array<Patch, 5> patches{{
      {{hl, -hw, -hh}, {0, 2 * hw, 0}, {0, 0, 2 * hh}},
      {{-hl, -hw, -hh}, {0, 2 * hw, 0}, {0, 0, 2 * hh}},
      {{-hl, hw, -hh}, {2 * hl, 0, 0}, {0, 0, 2 * hh}},
      {{-hl, -hw, -hh}, {2 * hl, 0, 0}, {0, 0, 2 * hh}},
      {{-hl, -hw, hh}, {2 * hl, 0, 0}, {0, 2 * hw, 0}},
  }};
  for (const auto& patch : patches) {
    const double area = norm(patch.du) * norm(patch.dv);
    const auto n = static_cast<int>(std::lround(area * density));
    for (int i = 0; i < n; ++i) {
      const Vec3 local = patch.origin + unit(rng) * patch.du + unit(rng) * patch.dv;
      Vec3 p{box.center.x + c * local.x - s * local.y, box.center.y + s * local.x + c * local.y,
             box.center.z + local.z};
      p += Vec3{jit(rng), jit(rng), jit(rng)};
      out.push_back({round_to_float(p.x), round_to_float(p.y), round_to_float(p.z)}, 0.3f);
    }
  }
}

const std::array<Vec3, 7> kCarPalette{{{0.75, 0.10, 0.10},
                                        {0.12, 0.22, 0.70},
                                        {0.90, 0.90, 0.88},
                                        {0.12, 0.12, 0.13},
                                        {0.60, 0.62, 0.65},
                                        {0.85, 0.72, 0.12},
                                        {0.10, 0.45, 0.22}}};

Image make_background(const SynthConfig& cfg, std::mt19937_64& rng) {
  Image img(cfg.image_width, cfg.image_height);
  std::uniform_real_distribution<double> noise(-cfg.image_noise, cfg.image_noise);
  std::uniform_real_distribution<double> tone(-0.05, 0.05);
  const double sky_shift = tone(rng), road_shift = tone(rng);
  for (int y = 0; y < img.height; ++y) {
    const bool sky = y + 0.5 < cfg.principal_y;
    for (int x = 0; x < img.width; ++x) {
      Vec3 c;
      if (sky) {
        const double t = (y + 0.5) / cfg.principal_y;
        c = Vec3{0.55, 0.68, 0.88} * (1.0 - 0.25 * t) + Vec3{0.75, 0.8, 0.85} * (0.25 * t);
        c += Vec3{sky_shift, sky_shift, sky_shift};
      } else {
        c = Vec3{0.42, 0.42, 0.43} + Vec3{road_shift, road_shift, road_shift};
      }
      const double n = noise(rng);
      img.set_pixel(x, y, {std::clamp(c.x + n, 0.0, 1.0), std::clamp(c.y + n, 0.0, 1.0),
                           std::clamp(c.z + n, 0.0, 1.0)});
    }
  }
  return img;
}

TriMesh to_camera_frame(const TriMesh& mesh, const Calibration& calib) {
  TriMesh out = mesh;
  for (auto& v : out.vertices) v = calib.velo_to_cam(v);
  return out;
}

}  // namespace

void SynthConfig::validate() const {
  if (!(ground_density > 0.0) || !(car_density > 0.0)) {
    throw std::invalid_argument("synthetic densities must be positive");
  }
  if (cars_min < 0 || cars_max < cars_min) throw std::invalid_argument("invalid cars-per-scene range");
  if (num_scenes < 0) throw std::invalid_argument("num_scenes must be non-negative");
  if (!(car_distance_min > 0.0) || car_distance_max < car_distance_min) {
    throw std::invalid_argument("invalid car distance range");
  }
  if (image_width <= 0 || image_height <= 0) throw std::invalid_argument("invalid image size");
}

std::optional<Box2D> project_box(const Box3D& box, const Calibration& calib, const CameraModel& cam,
                                 double* truncation) {
  double umin = 1e300, umax = -1e300, vmin = 1e300, vmax = -1e300;
  for (const auto& corner : box.corners()) {
    const auto px = calib.velo_to_pixel(corner, cam);
    if (!px) return std::nullopt;
    umin = std::min(umin, px->u);
    umax = std::max(umax, px->u);
    vmin = std::min(vmin, px->v);
    vmax = std::max(vmax, px->v);
  }
  Box2D full{umin, vmin, umax, vmax, 1.0, kCarClass};
  Box2D clipped{std::clamp(umin, 0.0, double(cam.width)), std::clamp(vmin, 0.0, double(cam.height)),
                std::clamp(umax, 0.0, double(cam.width)), std::clamp(vmax, 0.0, double(cam.height)), 1.0,
                kCarClass};
  if (clipped.area() <= 0.0) return std::nullopt;
  if (truncation) *truncation = 1.0 - clipped.area() / full.area();
  return clipped;
}

TriMesh box_mesh(const Box3D& box, const Vec3& color) {
  TriMesh mesh;
  const auto c = box.corners();
  // Corner rings: 0..3 bottom, 4..7 top; 0-1 is the +length face.
  const std::array<std::array<int, 4>, 6> quads{{{0, 1, 5, 4},    // front (+length)
                                                 {2, 3, 7, 6},    // back
                                                 {1, 2, 6, 5},    // left
                                                 {3, 0, 4, 7},    // right
                                                 {4, 5, 6, 7},    // top
                                                 {3, 2, 1, 0}}};  // bottom
  const std::array<double, 6> shade{0.72, 0.72, 0.95, 0.9, 1.15, 0.5};
  for (int q = 0; q < 6; ++q) {
    const auto base = static_cast<std::uint32_t>(mesh.vertices.size());
    const Vec3 col{std::clamp(color.x * shade[q], 0.0, 1.0), std::clamp(color.y * shade[q], 0.0, 1.0),
                   std::clamp(color.z * shade[q], 0.0, 1.0)};
    for (int k : quads[q]) {
      mesh.vertices.push_back(c[k]);
      mesh.colors.push_back(col);
    }
    mesh.faces.push_back({base, base + 1, base + 2});
    mesh.faces.push_back({base, base + 2, base + 3});
  }
  return mesh;
}

Scene gen_synthetic_scene(const SynthConfig& cfg, int index) {
  std::mt19937_64 rng(scene_seed(cfg.seed, index));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  Scene scene;
  char id[16];
  std::snprintf(id, sizeof(id), "%06d", index);
  scene.id = id;
  scene.calib = Calibration::synthetic(cfg.focal, cfg.principal_x, cfg.principal_y);
  const CameraModel cam = scene.calib.camera(cfg.image_width, cfg.image_height);
  const double ground_z = -cfg.sensor_height;

  std::vector<Obstacle> obstacles;
  const int n_cars = cfg.cars_min + static_cast<int>(unit(rng) * (cfg.cars_max - cfg.cars_min + 1));
  for (int c = 0, attempts = 0; c < std::min(n_cars, cfg.cars_max) && attempts < 200; ++attempts) {
    Box3D box;
    box.length = uniform(3.5, 4.3);
    box.width = uniform(1.5, 1.8);
    box.height = uniform(1.4, 1.6);
    const double dist = uniform(cfg.car_distance_min, cfg.car_distance_max);
    const double bearing = uniform(-0.45, 0.45);
    box.center = {dist * std::cos(bearing), dist * std::sin(bearing), ground_z + 0.5 * box.height};
    box.yaw = wrap_angle(uniform(-std::numbers::pi, std::numbers::pi));
    const auto b2 = project_box(box, scene.calib, cam);
    if (!b2) continue;
    bool ok = true;
    for (const auto& o : obstacles) {
      const double dx = o.box.center.x - box.center.x, dy = o.box.center.y - box.center.y;
      if (std::hypot(dx, dy) < 5.0) ok = false;
      const auto ob2 = project_box(o.box, scene.calib, cam);
      if (ob2 && iou_2d(*ob2, *b2) > 0.4) ok = false;
    }
    if (!ok) continue;
    Vec3 color = kCarPalette[static_cast<std::size_t>(unit(rng) * kCarPalette.size()) % kCarPalette.size()];
    color += Vec3{uniform(-0.04, 0.04), uniform(-0.04, 0.04), uniform(-0.04, 0.04)};
    obstacles.push_back({box, color, true});
    ++c;
  }
  const std::size_t n_car_obstacles = obstacles.size();

  for (int k = 0, attempts = 0; k < cfg.clutter_count && attempts < 100; ++attempts) {
    Box3D box;
    const bool pole = unit(rng) < 0.5;
    box.length = pole ? 0.2 : uniform(0.8, 1.6);
    box.width = pole ? 0.2 : uniform(0.8, 1.6);
    box.height = pole ? uniform(2.5, 4.0) : uniform(0.6, 1.2);
    const double dist = uniform(6.0, 35.0);
    const double bearing = uniform(-0.6, 0.6);
    box.center = {dist * std::cos(bearing), dist * std::sin(bearing), ground_z + 0.5 * box.height};
    box.yaw = uniform(-std::numbers::pi, std::numbers::pi);
    bool ok = true;
    for (const auto& o : obstacles)
      if (std::hypot(o.box.center.x - box.center.x, o.box.center.y - box.center.y) < 4.0) ok = false;
    if (!ok) continue;
    const Vec3 color = pole ? Vec3{0.35, 0.3, 0.25} : Vec3{0.2, 0.45 + uniform(-0.05, 0.05), 0.15};
    obstacles.push_back({box, color, false});
    ++k;
  }

  // Point cloud: object shells, then the visible ground.
  for (const auto& o : obstacles) {
    const double range = std::hypot(o.box.center.x, o.box.center.y);
    const double density = cfg.car_density * (10.0 / range) * (10.0 / range);
    sample_shell(o.box, density, cfg.car_jitter, rng, scene.cloud);
  }
  std::normal_distribution<double> ground_noise(0.0, cfg.ground_jitter);
  const double ground_area = cfg.ground_length * 2.0 * cfg.ground_half_width;
  const auto n_ground = static_cast<std::size_t>(std::lround(ground_area * cfg.ground_density));
  const Vec3 sensor{0.0, 0.0, 0.0};
  for (std::size_t i = 0; i < n_ground; ++i) {
    const Vec3 p{uniform(0.0, cfg.ground_length), uniform(-cfg.ground_half_width, cfg.ground_half_width),
                 ground_z + ground_noise(rng)};
    bool hidden = false;
    for (const auto& o : obstacles) {
      if (o.box.contains(p, 0.05) || segment_hits_box(sensor, p, o.box)) {
        hidden = true;
        break;
      }
    }
    if (!hidden) scene.cloud.push_back({round_to_float(p.x), round_to_float(p.y), round_to_float(p.z)}, 0.1f);
  }

  // Image: background plus flat-shaded boxes under a shared z-buffer.
  Image background = make_background(cfg, rng);
  TriMesh all;
  std::vector<std::size_t> face_owner;
  for (std::size_t i = 0; i < obstacles.size(); ++i) {
    const TriMesh m = to_camera_frame(box_mesh(obstacles[i].box, obstacles[i].color), scene.calib);
    const auto offset = static_cast<std::uint32_t>(all.vertices.size());
    all.vertices.insert(all.vertices.end(), m.vertices.begin(), m.vertices.end());
    all.colors.insert(all.colors.end(), m.colors.begin(), m.colors.end());
    for (const auto& f : m.faces) {
      all.faces.push_back({f[0] + offset, f[1] + offset, f[2] + offset});
      face_owner.push_back(i);
    }
  }
  const RasterResult raster = rasterize(all, cam, background);
  scene.image = raster.image;
  std::vector<std::size_t> visible(obstacles.size(), 0);
  for (const auto& s : raster.coverage.samples) ++visible[face_owner[s.face]];

  for (std::size_t i = 0; i < n_car_obstacles; ++i) {
    GroundTruth gt;
    gt.box = obstacles[i].box;
    double trunc = 0.0;
    gt.box2d = *project_box(gt.box, scene.calib, cam, &trunc);
    gt.truncation = std::max(0.0, trunc);
    const TriMesh alone = to_camera_frame(box_mesh(gt.box, obstacles[i].color), scene.calib);
    const std::size_t full = rasterize(alone, cam, background).coverage.samples.size();
    const double occluded = full > 0 ? 1.0 - static_cast<double>(visible[i]) / static_cast<double>(full) : 1.0;
    gt.occlusion = occluded < 0.1 ? 0 : (occluded < 0.5 ? 1 : 2);
    scene.objects.push_back(gt);
  }
  return scene;
}

std::vector<Scene> gen_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  std::vector<Scene> scenes;
  scenes.reserve(static_cast<std::size_t>(cfg.num_scenes));
  for (int i = 0; i < cfg.num_scenes; ++i) scenes.push_back(gen_synthetic_scene(cfg, i));
  return scenes;
}

}  // namespace advmesh
