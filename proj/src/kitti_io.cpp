#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "advmesh/dataio.hpp"

namespace advmesh {
namespace {

static_assert(std::endian::native == std::endian::little, "velodyne I/O assumes a little-endian host");

double parse_number(const std::string& tok, const std::filesystem::path& file, std::size_t line) {
  double v = 0.0;
  const char* first = tok.data();
  const char* last = tok.data() + tok.size();
  if (first != last && *first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) throw ParseError(file, line, "bad number '" + tok + "'");
  if (!std::isfinite(v)) throw ParseError(file, line, "non-finite value '" + tok + "'");
  return v;
}

std::vector<std::string> split_ws(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

const std::set<std::string>& known_classes() {
  static const std::set<std::string> names = {"Car",     "Van",  "Truck", "Pedestrian", "Person_sitting",
                                              "Cyclist", "Tram", "Misc",  "DontCare"};
  return names;
}

std::string format_numbers(const double* v, int n) {
  std::string out;
  char buf[40];
  for (int i = 0; i < n; ++i) {
    std::snprintf(buf, sizeof(buf), "%s%.12e", i ? " " : "", v[i]);
    out += buf;
  }
  return out;
}

}  // namespace

ParseError::ParseError(const std::filesystem::path& file, std::size_t line, const std::string& what)
    : std::runtime_error(file.string() + ":" + std::to_string(line) + ": " + what) {}

Calibration Calibration::synthetic(double focal, double cx, double cy) {
  Calibration c;
  c.p2 = {focal, 0, cx, 0, 0, focal, cy, 0, 0, 0, 1, 0};
  c.r0_rect = Mat3::identity();
  c.velo_to_cam_rotation = Mat3{{0, -1, 0, 0, 0, -1, 1, 0, 0}};
  c.velo_to_cam_translation = {0.0, -0.08, -0.27};
  return c;
}

Vec3 Calibration::velo_to_cam(const Vec3& p) const {
  return r0_rect * (velo_to_cam_rotation * p + velo_to_cam_translation);
}

Vec3 Calibration::cam_to_velo(const Vec3& c) const {
  return velo_to_cam_rotation.transposed() * (r0_rect.transposed() * c - velo_to_cam_translation);
}

Vec3 Calibration::velo_direction_to_cam(const Vec3& d) const {
  return r0_rect * (velo_to_cam_rotation * d);
}

Vec3 Calibration::cam_direction_to_velo(const Vec3& d) const {
  return velo_to_cam_rotation.transposed() * (r0_rect.transposed() * d);
}

CameraModel Calibration::camera(int width, int height) const { return {p2, width, height}; }

std::optional<PixelProjection> Calibration::velo_to_pixel(const Vec3& p, const CameraModel& cam) const {
  const Vec3 c = velo_to_cam(p);
  const auto& m = cam.projection;
  const double w = m[8] * c.x + m[9] * c.y + m[10] * c.z + m[11];
  if (!(w > 0.0)) return std::nullopt;
  return project(cam, c);
}

const char* difficulty_name(Difficulty d) {
  switch (d) {
    case Difficulty::Easy: return "Easy";
    case Difficulty::Moderate: return "Moderate";
    case Difficulty::Hard: return "Hard";
  }
  return "?";
}

bool in_difficulty(const GroundTruth& gt, Difficulty d) {
  switch (d) {
    case Difficulty::Easy: return gt.height_px() >= 40.0 && gt.occlusion <= 0 && gt.truncation <= 0.15;
    case Difficulty::Moderate: return gt.height_px() >= 25.0 && gt.occlusion <= 1 && gt.truncation <= 0.30;
    case Difficulty::Hard: return gt.height_px() >= 25.0 && gt.occlusion <= 2 && gt.truncation <= 0.50;
  }
  return false;
}

PointCloud read_velodyne(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  const auto size = std::filesystem::file_size(path);
  if (size % 16 != 0) {
    throw ParseError(path, 0, "size " + std::to_string(size) + " is not a multiple of 16 bytes");
  }
  std::vector<float> raw(size / 4);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(size));
  if (!in) throw ParseError(path, 0, "short read");
  PointCloud cloud;
  cloud.points.reserve(size / 16);
  cloud.intensity.reserve(size / 16);
  for (std::size_t i = 0; i < raw.size(); i += 4) {
    cloud.push_back({raw[i], raw[i + 1], raw[i + 2]}, raw[i + 3]);
  }
  return cloud;
}

void write_velodyne(const std::filesystem::path& path, const PointCloud& cloud) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  std::vector<float> raw;
  raw.reserve(cloud.size() * 4);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    raw.push_back(static_cast<float>(cloud.points[i].x));
    raw.push_back(static_cast<float>(cloud.points[i].y));
    raw.push_back(static_cast<float>(cloud.points[i].z));
    raw.push_back(cloud.intensity[i]);
  }
  out.write(reinterpret_cast<const char*>(raw.data()),
            static_cast<std::streamsize>(raw.size() * sizeof(float)));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Calibration read_calib(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::map<std::string, std::vector<double>> entries;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto colon = line.find(':');
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    if (colon == std::string::npos) throw ParseError(path, lineno, "expected 'key: values'");
    std::vector<double> vals;
    for (const auto& tok : split_ws(line.substr(colon + 1))) vals.push_back(parse_number(tok, path, lineno));
    entries[line.substr(0, colon)] = std::move(vals);
  }
  auto take = [&](const std::string& key, std::size_t n) -> const std::vector<double>& {
    auto it = entries.find(key);
    if (it == entries.end()) throw ParseError(path, lineno, "missing key " + key);
    if (it->second.size() != n) {
      throw ParseError(path, lineno, key + " has " + std::to_string(it->second.size()) +
                                         " values, expected " + std::to_string(n));
    }
    return it->second;
  };
  Calibration c;
  const auto& p2 = take("P2", 12);
  std::copy(p2.begin(), p2.end(), c.p2.begin());
  const auto& r0 = take("R0_rect", 9);
  std::copy(r0.begin(), r0.end(), c.r0_rect.m.begin());
  const auto& tr = take("Tr_velo_to_cam", 12);
  for (int r = 0; r < 3; ++r) {
    for (int k = 0; k < 3; ++k) c.velo_to_cam_rotation(r, k) = tr[r * 4 + k];
    c.velo_to_cam_translation[r] = tr[r * 4 + 3];
  }
  return c;
}

void write_calib(const std::filesystem::path& path, const Calibration& c) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  std::array<double, 12> tr{};
  for (int r = 0; r < 3; ++r) {
    for (int k = 0; k < 3; ++k) tr[r * 4 + k] = c.velo_to_cam_rotation(r, k);
    tr[r * 4 + 3] = c.velo_to_cam_translation[r];
  }
  for (const char* key : {"P0", "P1"}) out << key << ": " << format_numbers(c.p2.data(), 12) << "\n";
  out << "P2: " << format_numbers(c.p2.data(), 12) << "\n";
  out << "P3: " << format_numbers(c.p2.data(), 12) << "\n";
  out << "R0_rect: " << format_numbers(c.r0_rect.m.data(), 9) << "\n";
  out << "Tr_velo_to_cam: " << format_numbers(tr.data(), 12) << "\n";
}

Box3D camera_label_to_box(double h, double w, double l, const Vec3& location, double rotation_y,
                          const Calibration& calib) {
  const Vec3 bottom_rect = location;
  const Vec3 top_rect = location - Vec3{0.0, h, 0.0};
  const Vec3 bottom = calib.cam_to_velo(bottom_rect);
  const Vec3 top = calib.cam_to_velo(top_rect);
  const Vec3 heading = calib.cam_direction_to_velo({std::cos(rotation_y), 0.0, -std::sin(rotation_y)});
  Box3D box;
  box.center = 0.5 * (bottom + top);
  box.height = h;
  box.width = w;
  box.length = l;
  box.yaw = wrap_angle(std::atan2(heading.y, heading.x));
  return box;
}

void box_to_camera_label(const Box3D& box, const Calibration& calib, Vec3& location, double& rotation_y) {
  const Vec3 bottom{box.center.x, box.center.y, box.bottom_z()};
  location = calib.velo_to_cam(bottom);
  const Vec3 d = calib.velo_direction_to_cam({std::cos(box.yaw), std::sin(box.yaw), 0.0});
  rotation_y = wrap_angle(std::atan2(-d.z, d.x));
}

std::vector<LabelLine> read_label_lines(const std::filesystem::path& path, const Calibration& calib) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<LabelLine> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto tok = split_ws(line);
    if (tok.empty()) continue;
    if (tok.size() != 15 && tok.size() != 16) {
      throw ParseError(path, lineno, "expected 15 or 16 fields, found " + std::to_string(tok.size()));
    }
    if (!known_classes().contains(tok[0])) throw ParseError(path, lineno, "unknown class '" + tok[0] + "'");
    std::array<double, 15> v{};
    for (std::size_t i = 1; i < tok.size(); ++i) v[i - 1] = parse_number(tok[i], path, lineno);
    if (tok[0] != "Car") continue;
    LabelLine entry;
    GroundTruth& gt = entry.object;
    gt.type = tok[0];
    gt.truncation = v[0];
    gt.occlusion = static_cast<int>(v[1]);
    gt.box2d = Box2D{v[3], v[4], v[5], v[6], 1.0, kCarClass};
    const double h = v[7], w = v[8], l = v[9];
    if (!(h > 0 && w > 0 && l > 0)) throw ParseError(path, lineno, "non-positive box dimensions");
    gt.box = camera_label_to_box(h, w, l, {v[10], v[11], v[12]}, v[13], calib);
    if (tok.size() == 16) entry.score = v[14];
    out.push_back(std::move(entry));
  }
  return out;
}

std::vector<GroundTruth> read_labels(const std::filesystem::path& path, const Calibration& calib) {
  std::vector<GroundTruth> out;
  for (auto& l : read_label_lines(path, calib)) out.push_back(std::move(l.object));
  return out;
}

std::string format_label_line(const GroundTruth& gt, const Calibration& calib, std::optional<double> score) {
  Vec3 loc;
  double ry = 0.0;
  box_to_camera_label(gt.box, calib, loc, ry);
  const double alpha = wrap_angle(ry - std::atan2(loc.x, loc.z));
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "%s %.6f %d %.6f %.6f %.6f %.6f %.6f %.9g %.9g %.9g %.9g %.9g %.9g %.9g", gt.type.c_str(),
                gt.truncation, gt.occlusion, alpha, gt.box2d.left, gt.box2d.top, gt.box2d.right,
                gt.box2d.bottom, gt.box.height, gt.box.width, gt.box.length, loc.x, loc.y, loc.z, ry);
  std::string out = buf;
  if (score) {
    std::snprintf(buf, sizeof(buf), " %.6f", *score);
    out += buf;
  }
  return out;
}

void write_labels(const std::filesystem::path& path, const std::vector<GroundTruth>& objects,
                  const Calibration& calib) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  for (const auto& gt : objects) out << format_label_line(gt, calib) << "\n";
}

Scene read_kitti_scene(const std::filesystem::path& velodyne, const std::filesystem::path& image,
                       const std::filesystem::path& calib, const std::filesystem::path& label) {
  Scene scene;
  scene.id = velodyne.stem().string();
  scene.cloud = read_velodyne(velodyne);
  scene.image = read_png(image);
  scene.calib = read_calib(calib);
  scene.objects = read_labels(label, scene.calib);
  return scene;
}

void write_scene(const std::filesystem::path& root, const Scene& scene) {
  for (const char* sub : {"velodyne", "image_2", "calib", "label_2"})
    std::filesystem::create_directories(root / sub);
  write_velodyne(root / "velodyne" / (scene.id + ".bin"), scene.cloud);
  write_png(root / "image_2" / (scene.id + ".png"), scene.image);
  write_calib(root / "calib" / (scene.id + ".txt"), scene.calib);
  write_labels(root / "label_2" / (scene.id + ".txt"), scene.objects, scene.calib);
}

std::vector<std::string> list_scene_ids(const std::filesystem::path& root) {
  std::vector<std::string> ids;
  const auto dir = root / "label_2";
  if (!std::filesystem::is_directory(dir)) {
    throw std::runtime_error("no dataset at " + root.string() + " (missing label_2/); run gen-scenes first");
  }
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.path().extension() == ".txt") ids.push_back(entry.path().stem().string());
  std::sort(ids.begin(), ids.end());
  return ids;
}

Scene read_scene(const std::filesystem::path& root, const std::string& id) {
  return read_kitti_scene(root / "velodyne" / (id + ".bin"), root / "image_2" / (id + ".png"),
                          root / "calib" / (id + ".txt"), root / "label_2" / (id + ".txt"));
}

std::vector<Scene> read_dataset(const std::filesystem::path& root) {
  std::vector<Scene> scenes;
  for (const auto& id : list_scene_ids(root)) scenes.push_back(read_scene(root, id));
  return scenes;
}

bool is_training_scene(const std::string& id) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : id) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  h ^= h >> 29;
  return (h % 4) != 0;
}

std::vector<Placement> place_meshes(const Scene& scene, const TriMesh& mesh, const Displacement& d,
                                    double clearance) {
  std::vector<Placement> out;
  out.reserve(scene.objects.size());
  for (const auto& gt : scene.objects) {
    Placement p;
    p.pose = roof_pose(gt.box, clearance);
    p.mesh = apply_deformation(mesh, d, p.pose);
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace advmesh
