#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "advmesh/boxes.hpp"
#include "advmesh/geometry.hpp"
#include "advmesh/image.hpp"
#include "advmesh/lidar.hpp"
#include "advmesh/raster.hpp"

namespace advmesh {

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::filesystem::path& file, std::size_t line, const std::string& what);
};

// KITTI calibration chain: pixel = P2 * R0_rect * Tr_velo_to_cam * p_velo.
struct Calibration {
  std::array<double, 12> p2{};
  Mat3 r0_rect;
  Mat3 velo_to_cam_rotation;
  Vec3 velo_to_cam_translation;

  // A KITTI-like rig: camera axes x right, y down, z forward.
  static Calibration synthetic(double focal, double cx, double cy);

  Vec3 velo_to_cam(const Vec3& p) const;
  Vec3 cam_to_velo(const Vec3& c) const;
  Vec3 velo_direction_to_cam(const Vec3& d) const;
  Vec3 cam_direction_to_velo(const Vec3& d) const;
  CameraModel camera(int width, int height) const;
  // Pixel coordinates of a sensor-frame point; empty when behind the camera.
  std::optional<PixelProjection> velo_to_pixel(const Vec3& p, const CameraModel& cam) const;
};

struct GroundTruth {
  Box3D box;
  Box2D box2d;
  double truncation = 0.0;
  int occlusion = 0;
  std::string type = "Car";

  double height_px() const { return box2d.height(); }
};

enum class Difficulty { Easy, Moderate, Hard };

const char* difficulty_name(Difficulty d);
// KITTI thresholds on 2D height, occlusion level and truncation.
bool in_difficulty(const GroundTruth& gt, Difficulty d);

struct Scene {
  std::string id;
  PointCloud cloud;
  Image image;
  Calibration calib;
  std::vector<GroundTruth> objects;

  CameraModel camera() const { return calib.camera(image.width, image.height); }
};

// KITTI velodyne: little-endian float32 x, y, z, reflectance per point.
PointCloud read_velodyne(const std::filesystem::path& path);
void write_velodyne(const std::filesystem::path& path, const PointCloud& cloud);

Calibration read_calib(const std::filesystem::path& path);
void write_calib(const std::filesystem::path& path, const Calibration& calib);

// Parses 15-field label lines (16 when a score is appended). Only cars are
// kept; other known classes are skipped; unknown names raise ParseError.
struct LabelLine {
  GroundTruth object;
  std::optional<double> score;
};
std::vector<LabelLine> read_label_lines(const std::filesystem::path& path, const Calibration& calib);
std::vector<GroundTruth> read_labels(const std::filesystem::path& path, const Calibration& calib);
std::string format_label_line(const GroundTruth& gt, const Calibration& calib,
                              std::optional<double> score = std::nullopt);
void write_labels(const std::filesystem::path& path, const std::vector<GroundTruth>& objects,
                  const Calibration& calib);

// Label location is the bottom center in the rectified camera frame.
Box3D camera_label_to_box(double h, double w, double l, const Vec3& location, double rotation_y,
                          const Calibration& calib);
void box_to_camera_label(const Box3D& box, const Calibration& calib, Vec3& location,
                         double& rotation_y);

Scene read_kitti_scene(const std::filesystem::path& velodyne, const std::filesystem::path& image,
                       const std::filesystem::path& calib, const std::filesystem::path& label);

// Dataset directory layout: velodyne/, image_2/, calib/, label_2/ keyed by id.
void write_scene(const std::filesystem::path& root, const Scene& scene);
std::vector<std::string> list_scene_ids(const std::filesystem::path& root);
Scene read_scene(const std::filesystem::path& root, const std::string& id);
std::vector<Scene> read_dataset(const std::filesystem::path& root);

struct SynthConfig {
  int num_scenes = 200;
  int cars_min = 1;
  int cars_max = 3;
  int clutter_count = 3;
  double car_distance_min = 7.0;
  double car_distance_max = 20.0;
  double ground_length = 45.0;      // meters ahead of the sensor
  double ground_half_width = 20.0;  // meters to each side
  double ground_density = 1.5;      // points / m^2
  double ground_jitter = 0.02;      // meters
  double car_density = 30.0;        // points / m^2 at 10 m, falls off with range^2
  double car_jitter = 0.02;         // meters, per coordinate
  double sensor_height = 1.73;      // meters above ground
  int image_width = 384;
  int image_height = 128;
  double focal = 250.0;
  double principal_x = 192.0;
  double principal_y = 44.0;
  double image_noise = 0.03;
  std::uint64_t seed = 7;

  void validate() const;
};

std::vector<Scene> gen_synthetic(const SynthConfig& cfg);
Scene gen_synthetic_scene(const SynthConfig& cfg, int index);

// Bounding rectangle of the projected 3D box corners, clipped to the image;
// `truncation` receives the clipped-away area fraction.
std::optional<Box2D> project_box(const Box3D& box, const Calibration& calib, const CameraModel& cam,
                                 double* truncation = nullptr);

// Renders a flat-shaded box (four vertices per face) into `image`.
TriMesh box_mesh(const Box3D& box, const Vec3& color);

// Train/validation membership from a stable hash of the scene id.
bool is_training_scene(const std::string& id);

struct Placement {
  RigidTransform pose;
  TriMesh mesh;  // deformed and placed, sensor frame
};

// One placement per ground-truth car, all sharing `d`.
std::vector<Placement> place_meshes(const Scene& scene, const TriMesh& mesh, const Displacement& d,
                                    double clearance);

}  // namespace advmesh
