#pragma once

#include <array>
#include <string>
#include <vector>

#include "advmesh/boxes.hpp"
#include "advmesh/dataio.hpp"

namespace advmesh {

using Point2 = std::array<double, 2>;
using Polygon2 = std::vector<Point2>;

inline constexpr double kClipEpsilon = 1e-9;

// Shoelace area, positive for counter-clockwise polygons.
double polygon_area(const Polygon2& poly);
// Sutherland-Hodgman clipping of `subject` against the convex, counter-clockwise `clip`.
Polygon2 clip_polygon(const Polygon2& subject, const Polygon2& clip);

double bev_intersection_area(const Box3D& a, const Box3D& b);
double iou_bev(const Box3D& a, const Box3D& b);
double iou_3d(const Box3D& a, const Box3D& b);

enum class IouView { Bev, ThreeD };

struct EvalConfig {
  double iou_threshold = 0.7;
  IouView view = IouView::Bev;
  Difficulty difficulty = Difficulty::Moderate;
  int recall_points = 40;  // 40 (current KITTI) or 11

  void validate() const;
  friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

struct ScoredBox {
  Box3D box;
  double score = 0.0;
};

// Detections and ground truth of one frame.
struct FrameEval {
  std::vector<ScoredBox> detections;
  std::vector<GroundTruth> ground_truth;
};

struct PRPoint {
  double recall = 0.0;
  double precision = 0.0;
};

struct APReport {
  EvalConfig config;
  double ap = 0.0;
  std::size_t num_detections = 0;
  std::size_t num_ground_truth = 0;  // inside the difficulty bucket
  std::size_t true_positives = 0;
  std::size_t false_positives = 0;
  std::vector<PRPoint> curve;  // one entry per counted detection, score-descending
};

// Greedy score-descending matching; ground truth outside the difficulty
// bucket is an ignore region, so detections matched to it count as neither
// true nor false positives.
APReport average_precision(const std::vector<FrameEval>& frames, const EvalConfig& cfg);
// N-point interpolated precision over a precision/recall curve.
double interpolated_ap(const std::vector<PRPoint>& curve, int recall_points);

struct DeltaRow {
  Difficulty difficulty = Difficulty::Moderate;
  double clean_ap = 0.0;
  double attacked_ap = 0.0;
  double absolute_drop = 0.0;
  double relative_drop = 0.0;  // (clean - attacked) / clean, 0 when clean is 0
};

// Throws std::invalid_argument when the two reports used different settings.
DeltaRow attack_delta(const APReport& clean, const APReport& attacked);

// Rows are attack types, columns are Easy / Moderate / Hard AP in percent.
struct TableRow {
  std::string label;
  std::array<double, 3> ap{};
};

std::string format_table_text(const std::vector<TableRow>& rows);
std::string format_table_csv(const std::vector<TableRow>& rows);

}  // namespace advmesh
