#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "advmesh/dataio.hpp"
#include "advmesh/diffcore.hpp"
#include "advmesh/geometry.hpp"
#include "advmesh/lidar.hpp"
#include "advmesh/raster.hpp"
#include "advmesh/victim.hpp"

namespace advmesh {

enum class AttackPhase { Shape, Texture };

const char* phase_name(AttackPhase p);
AttackPhase parse_phase(const std::string& s);
const char* frustum_source_name(FrustumSource s);
FrustumSource parse_frustum_source(const std::string& s);

struct AttackConfig {
  double lambda = 0.1;
  AttackPhase phase = AttackPhase::Shape;
  int shape_epochs = 8;
  int texture_epochs = 8;
  int batch_size = 10;
  std::uint64_t seed = 3;
  Extents extents;
  double shape_lr = 0.01;
  double texture_lr = 0.05;
  FrustumSource frustum_source = FrustumSource::GroundTruth;
  double clearance = 0.4;
  // Drop scene points hidden behind the object; off keeps the add-only merge.
  bool occlusion_cull = false;
  int subdivisions = 2;
  double radius = 0.4;
  // Image loss: anchors at or above this objectness overlapping a car count as detections.
  double image_score_floor = 0.25;
  double image_match_iou = 0.3;
  LidarConfig lidar = LidarConfig::kitti_default();
  int threads = 1;

  int epochs() const { return phase == AttackPhase::Shape ? shape_epochs : texture_epochs; }
  double lr() const { return phase == AttackPhase::Shape ? shape_lr : texture_lr; }
  void validate() const;
};

nlohmann::json to_json(const AttackConfig& cfg);
AttackConfig attack_config_from_json(const nlohmann::json& j);

// The universal adversarial object: one displacement block and one color
// block shared by every scene and placement.
struct AttackParams {
  TriMesh base;
  ParamBlock displacement;  // "displacement", vertices x 3
  ParamBlock colors;        // "colors", vertices x 3, bounded to [0, 1]

  static AttackParams initial(int subdivisions, double radius);
  Displacement displacement_values() const { return displacement.as_vec3(); }
  std::vector<Vec3> color_values() const { return colors.as_vec3(); }
  // Base plus displacement in the object frame, carrying the current colors.
  TriMesh object_mesh() const;
};

// `steps` is the optimizer step count recorded alongside the run's settings.
Checkpoint attack_checkpoint(const AttackParams& params, const AttackConfig& cfg, std::size_t steps = 0);
AttackParams attack_params_from_checkpoint(const Checkpoint& ckpt);

// ---------------------------------------------------------------------------
// Scene composition.

struct CompositeOptions {
  bool lidar = true;
  bool image = true;
};

struct Composite {
  std::vector<Placement> placements;
  std::vector<std::size_t> vertex_offset;  // first combined vertex of each placement
  TriMesh combined;                        // all placements, sensor frame
  PointCloud cloud;                        // occlusion-culled scene followed by rendered points
  std::size_t scene_points = 0;            // rendered points start at this index
  std::vector<HitRecord> hits;             // face ids index `combined`
  Image image;
  CoverageMap coverage;                    // vertex ids index `combined`
};

// Places the object on every ground-truth car and renders it into the
// point cloud and/or the image; disabled channels keep the clean data.
Composite compose_scene(const Scene& scene, const AttackParams& params, const AttackConfig& cfg,
                        const CompositeOptions& opts);
// Returns the scene with the composite's cloud and image swapped in.
Scene attacked_scene(const Scene& scene, const Composite& c);

// ---------------------------------------------------------------------------
// Losses.

inline constexpr double kMaxCarProbability = 1.0 - 1e-7;

struct CarProb {
  double p = 0.0;
  std::size_t index = 0;  // point carrying the maximum
};

// Highest car probability among car-classified points; empty when none.
std::optional<CarProb> car_prob(std::span<const Logits> logits);

struct MeshTerm {
  std::optional<double> p;
  double iou = 0.0;
};

double l_mesh(std::span<const MeshTerm> terms);

// -log(1 - p) evaluated from the logits as softplus(car - not-car); finite for
// any logits, so no clamp is needed on the training path.
double car_nll(const Logits& l);

// One frustum's contribution, kept for reporting.
struct ObjectTerm {
  std::string scene_id;
  std::size_t object = 0;
  std::optional<double> p;
  double iou = 0.0;
  double nll = 0.0;   // -log(1 - p), 0 when p is absent
  double loss = 0.0;  // iou * nll
};

struct PcLoss {
  double l_mesh = 0.0;
  double l_lap = 0.0;
  double total = 0.0;
  std::vector<ObjectTerm> terms;
  Displacement grad;  // d(total)/d(displacement), when requested
};

// Mesh term of one scene; adds d(L_mesh)/d(displacement) into `grad` when non-null.
std::vector<ObjectTerm> scene_mesh_terms(const Scene& scene, const Victim& victim, const AttackParams& params,
                                         const AttackConfig& cfg, Displacement* grad);

PcLoss pc_loss(std::span<const Scene* const> batch, const Victim& victim, const AttackParams& params,
               const AttackConfig& cfg, bool with_grad);

struct ImageLoss {
  double loss = 0.0;
  std::size_t detections = 0;
  std::vector<Vec3> color_grad;  // per base vertex, when requested
};

// Sum of objectness over anchors at or above the score floor whose boxes
// overlap a ground-truth car, on the image with the object rendered in.
ImageLoss image_loss(const Scene& scene, const Victim& victim, const AttackParams& params, const AttackConfig& cfg,
                     bool with_grad);

// ---------------------------------------------------------------------------
// Optimization.

struct LossReport {
  int epoch = 0;
  int batch = 0;
  double l_mesh = 0.0;
  double l_lap = 0.0;
  double total = 0.0;
  double image_loss = 0.0;
  std::vector<ObjectTerm> terms;
};

// Runs one phase in place on `params`. Throws InvalidState for an untrained
// victim and std::logic_error if a constraint is ever violated after a step.
std::vector<LossReport> run_attack(const AttackConfig& cfg, const std::vector<Scene>& scenes, const Victim& victim,
                                   AttackParams& params);

// Mean total (shape) or image loss (texture) per epoch.
std::vector<double> epoch_means(const std::vector<LossReport>& trail, AttackPhase phase);

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossReport>& trail);

}  // namespace advmesh
