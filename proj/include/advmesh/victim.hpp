#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "advmesh/boxes.hpp"
#include "advmesh/dataio.hpp"
#include "advmesh/diffcore.hpp"
#include "advmesh/eval.hpp"
#include "advmesh/image.hpp"
#include "advmesh/lidar.hpp"

namespace advmesh {

class InvalidState : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Fully connected layer, weights row-major (out x in).
struct Dense {
  int in = 0;
  int out = 0;
  std::vector<double> w;
  std::vector<double> b;

  Dense() = default;
  Dense(int in_dim, int out_dim) : in(in_dim), out(out_dim), w(std::size_t(in_dim) * out_dim, 0.0), b(out_dim, 0.0) {}
  void init(std::uint64_t seed);
  // y = W x + b
  void forward(const double* x, double* y) const;
  // dx += W^T dy (skipped when dx is null); with grads, dW += dy x^T and db += dy.
  void backward(const double* x, const double* dy, double* dx, Dense* grads) const;
  std::size_t parameter_count() const { return w.size() + b.size(); }
};

inline double leaky_relu(double x, double leak) { return x > 0.0 ? x : leak * x; }

// ---------------------------------------------------------------------------
// 2D stage: sliding-window objectness over a coarse anchor grid.

struct ScorerConfig {
  int stride = 16;
  int window_width = 160;
  int window_height = 80;
  int pool_cols = 10;
  int pool_rows = 5;
  int hidden = 48;
  double threshold = 0.5;
  double nms_iou = 0.5;

  // Per pooling cell and channel: mean of (pixel - 0.5) and mean of its square.
  int feature_count() const { return pool_cols * pool_rows * 6; }
};

struct Anchor {
  double cx = 0.0;
  double cy = 0.0;
};

struct ScorerForward {
  int width = 0;
  int height = 0;
  Image image;
  std::vector<Anchor> anchors;
  std::vector<double> features;  // anchors x feature_count
  std::vector<double> hidden;    // post-activation, anchors x hidden
  std::vector<double> scores;    // logistic objectness per anchor
  std::vector<Box2D> boxes;      // regressed box per anchor, score attached
};

class Scorer2D {
 public:
  Scorer2D() = default;
  explicit Scorer2D(const ScorerConfig& cfg, std::uint64_t seed = 1);

  const ScorerConfig& config() const { return cfg_; }
  ScorerConfig& config() { return cfg_; }
  bool trained() const { return trained_; }
  void set_trained(bool t) { trained_ = t; }

  std::vector<Anchor> anchors(int width, int height) const;
  void pooled_features(const Image& image, const std::vector<Anchor>& anchors, std::vector<double>& out) const;
  ScorerForward forward(const Image& image) const;
  // Adds d(loss)/d(pixel) for the given per-anchor objectness gradients.
  Image backward(const ScorerForward& fwd, std::span<const double> score_grad) const;

  // Per-sample training pieces used by train_scorer.
  double head_forward(const double* features, double* hidden, double* box) const;
  // `grads` and `dfeatures` may be null.
  void head_backward(const double* features, const double* hidden, double dlogit, const double* dbox,
                     Scorer2D* grads, double* dfeatures) const;

  std::vector<ParamBlock> export_blocks(const std::string& prefix) const;
  void import_blocks(const Checkpoint& ckpt, const std::string& prefix);
  void zero();
  std::vector<Dense*> layers() { return {&layer1_, &objectness_, &box_}; }
  std::vector<const Dense*> layers() const { return {&layer1_, &objectness_, &box_}; }

 private:
  ScorerConfig cfg_;
  Dense layer1_;
  Dense objectness_;
  Dense box_;
  bool trained_ = false;
};

// Objectness-thresholded boxes after greedy NMS. Throws InvalidState when
// the scorer is untrained.
std::vector<Box2D> propose_2d(const Image& image, const Scorer2D& scorer);
std::vector<Box2D> nms(std::vector<Box2D> boxes, double iou_threshold);

// ---------------------------------------------------------------------------
// 3D stage.

struct Frustum {
  Box2D box;
  std::vector<std::size_t> indices;  // into the scene cloud
  std::vector<Vec3> points;          // centroid-subtracted
  Vec3 centroid;

  bool empty() const { return indices.empty(); }
};

// Points with positive depth whose projection lies inside `box`.
Frustum extract_frustum(const PointCloud& cloud, const Box2D& box, const Calibration& calib,
                        const CameraModel& cam);
// Keeps at most `max_points` members (seeded choice, original order) and re-centers.
Frustum sample_frustum(const Frustum& f, const PointCloud& cloud, std::size_t max_points, std::uint64_t seed);

struct SegNet {
  int hidden = 48;
  double leak = 0.1;
  Dense enc1, enc2, cls1, cls2;

  SegNet() = default;
  explicit SegNet(int h, std::uint64_t seed = 1);
  std::vector<Dense*> layers() { return {&enc1, &enc2, &cls1, &cls2}; }
  std::vector<const Dense*> layers() const { return {&enc1, &enc2, &cls1, &cls2}; }
  void zero();
};

using Logits = std::array<double, 2>;  // (not-car, car)

struct SegForward {
  std::vector<Vec3> input;
  std::vector<double> a1, a2, c1;  // post-activation, points x hidden
  std::vector<double> global;
  std::vector<std::size_t> argmax;  // point index feeding each global channel
  std::vector<Logits> logits;
};

SegForward segment(const SegNet& net, std::span<const Vec3> points);
// Returns d(loss)/d(input point); accumulates weight gradients into `grads` when non-null.
std::vector<Vec3> segment_backward(const SegNet& net, const SegForward& fwd, std::span<const Logits> logit_grads,
                                   SegNet* grads);

// Car probability of one point; ties at 0.5 count as car.
double car_probability(const Logits& l);
bool is_car(const Logits& l);

inline constexpr std::size_t kMinBoxPoints = 8;

inline constexpr double kClusterRadius = 0.8;  // meters

// Principal-axis box fit over the largest Euclidean cluster of masked points
// (linkage kClusterRadius; frustum coordinates are re-offset by the
// centroid). Empty when that cluster has fewer than kMinBoxPoints members.
std::optional<Box3D> estimate_box(const Frustum& frustum, const std::vector<bool>& car_mask);

// ---------------------------------------------------------------------------
// Cascade.

enum class FrustumSource { GroundTruth, Detector };

struct VictimConfig {
  ScorerConfig scorer;
  int seg_hidden = 64;
  std::size_t frustum_points = 256;
  // Context added around a 2D box before extruding it, as fractions of the
  // box size; the top margin admits anything sitting on the object.
  double expand_top = 0.6;
  double expand_side = 0.1;
  double expand_bottom = 0.05;
  double label_margin = 0.1;  // meters around a ground-truth box counted as car
  double bev_nms_iou = 0.3;   // 3D boxes overlapping a higher-scored one by this much are dropped
};

struct Victim {
  VictimConfig cfg;
  Scorer2D scorer;
  SegNet seg;

  bool trained() const { return scorer.trained(); }
};

Box2D expand_box(const Box2D& box, const VictimConfig& cfg);

struct Detection3D {
  Box3D box;
  double score = 0.0;
  Box2D proposal;
  std::size_t source_index = 0;  // index into the 2D boxes
};

// What the victim saw for one 2D box; kept for the attack's backward pass.
struct FrustumPass {
  Box2D box;
  Frustum frustum;
  SegForward seg;
  std::optional<Box3D> estimate;
};

// Seeds frustum subsampling for one 2D box of one scene.
std::uint64_t frustum_seed(std::uint64_t base, const std::string& scene_id, std::size_t box_index);

FrustumPass run_frustum(const Victim& victim, const PointCloud& cloud, const Box2D& box2d, const Calibration& calib,
                        const CameraModel& cam, std::uint64_t seed);

// One 3D detection per 2D box whose frustum yields a box fit, then greedy
// bird's-eye-view suppression; output is score-descending.
std::vector<Detection3D> detect(const Victim& victim, const PointCloud& cloud, const std::vector<Box2D>& boxes2d,
                                const Calibration& calib, const CameraModel& cam, const std::string& scene_id,
                                std::uint64_t seed);

struct VictimTrainConfig {
  int scorer_epochs = 45;
  double scorer_lr = 3e-3;
  int scorer_batch = 128;
  double positive_weight = 8.0;
  int seg_epochs = 100;
  double seg_lr = 2e-3;
  int seg_batch = 4;
  double box_jitter = 0.1;
  std::uint64_t seed = 11;
};

struct VictimReport {
  double seg_accuracy = 0.0;
  double clean_bev_ap = 0.0;
  double scorer_recall = 0.0;
  double final_scorer_loss = 0.0;
  double final_seg_loss = 0.0;
};

// Runs the cascade on every scene; ground-truth frustums use the labeled 2D
// boxes with score 1.
std::vector<FrameEval> detect_frames(const Victim& victim, const std::vector<Scene>& scenes, FrustumSource source,
                                     std::uint64_t seed);
// Fraction of in-bucket ground-truth cars matched by a 2D proposal at IoU >= iou.
double proposal_recall(const Victim& victim, const std::vector<Scene>& scenes, double iou = 0.5,
                       Difficulty difficulty = Difficulty::Hard);

void train_scorer(Scorer2D& scorer, const std::vector<Scene>& scenes, const VictimTrainConfig& cfg);
void train_segnet(Victim& victim, const std::vector<Scene>& scenes, const VictimTrainConfig& cfg,
                  double* final_loss = nullptr);
// Held-out per-point accuracy on ground-truth frustums.
double segmentation_accuracy(const Victim& victim, const std::vector<Scene>& scenes, std::uint64_t seed);

Victim train_victim(const std::vector<Scene>& train, const std::vector<Scene>& val, const VictimConfig& vcfg,
                    const VictimTrainConfig& cfg, VictimReport* report = nullptr);

Checkpoint victim_checkpoint(const Victim& victim);
Victim victim_from_checkpoint(const Checkpoint& ckpt);

nlohmann::json to_json(const VictimConfig& cfg);
VictimConfig victim_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const VictimTrainConfig& cfg);
VictimTrainConfig victim_train_config_from_json(const nlohmann::json& j);

}  // namespace advmesh
