#include "advmesh/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

namespace advmesh {
namespace {

double cross2(const Point2& o, const Point2& a, const Point2& b) {
  return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
}

Polygon2 footprint(const Box3D& box) {
  const auto c = box.bev_corners();
  return {c.begin(), c.end()};
}

}  // namespace

double polygon_area(const Polygon2& poly) {
  double a = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const auto& p = poly[i];
    const auto& q = poly[(i + 1) % poly.size()];
    a += p[0] * q[1] - q[0] * p[1];
  }
  return 0.5 * a;
}

Polygon2 clip_polygon(const Polygon2& subject, const Polygon2& clip) {
  Polygon2 output = subject;
  for (std::size_t e = 0; e < clip.size() && !output.empty(); ++e) {
    const Point2& a = clip[e];
    const Point2& b = clip[(e + 1) % clip.size()];
    const Polygon2 input = std::move(output);
    output.clear();
    auto inside = [&](const Point2& p) { return cross2(a, b, p) >= -kClipEpsilon; };
    auto intersect = [&](const Point2& p, const Point2& q) {
      const double dp = cross2(a, b, p);
      const double dq = cross2(a, b, q);
      const double t = dp / (dp - dq);
      return Point2{p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])};
    };
    for (std::size_t i = 0; i < input.size(); ++i) {
      const Point2& cur = input[i];
      const Point2& prev = input[(i + input.size() - 1) % input.size()];
      const bool cur_in = inside(cur), prev_in = inside(prev);
      if (cur_in) {
        if (!prev_in) output.push_back(intersect(prev, cur));
        output.push_back(cur);
      } else if (prev_in) {
        output.push_back(intersect(prev, cur));
      }
    }
  }
  return output;
}

double bev_intersection_area(const Box3D& a, const Box3D& b) {
  const Polygon2 inter = clip_polygon(footprint(a), footprint(b));
  if (inter.size() < 3) return 0.0;
  return std::max(0.0, polygon_area(inter));
}

double iou_bev(const Box3D& a, const Box3D& b) {
  const double inter = bev_intersection_area(a, b);
  const double area_a = a.length * a.width, area_b = b.length * b.width;
  const double uni = area_a + area_b - inter;
  return uni > 0.0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

double iou_3d(const Box3D& a, const Box3D& b) {
  const double overlap_z = std::min(a.top_z(), b.top_z()) - std::max(a.bottom_z(), b.bottom_z());
  if (overlap_z <= 0.0) return 0.0;
  const double inter = bev_intersection_area(a, b) * overlap_z;
  const double uni = a.volume() + b.volume() - inter;
  return uni > 0.0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

void EvalConfig::validate() const {
  if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) {
    throw std::invalid_argument("IoU threshold must lie in (0, 1]");
  }
  if (recall_points < 2) throw std::invalid_argument("AP needs at least two recall points");
}

double interpolated_ap(const std::vector<PRPoint>& curve, int recall_points) {
  // 40-point sampling skips recall 0; 11-point sampling includes it.
  double sum = 0.0;
  for (int k = 0; k < recall_points; ++k) {
    const double r = recall_points == 11 ? k / 10.0 : (k + 1.0) / recall_points;
    double best = 0.0;
    for (const auto& pt : curve)
      if (pt.recall >= r - 1e-12) best = std::max(best, pt.precision);
    sum += best;
  }
  return sum / recall_points;
}

APReport average_precision(const std::vector<FrameEval>& frames, const EvalConfig& cfg) {
  cfg.validate();
  APReport report;
  report.config = cfg;

  struct Ref {
    std::size_t frame, det;
    double score;
  };
  std::vector<Ref> order;
  std::vector<std::vector<bool>> valid(frames.size()), matched(frames.size());
  for (std::size_t f = 0; f < frames.size(); ++f) {
    const auto& fr = frames[f];
    for (std::size_t d = 0; d < fr.detections.size(); ++d) order.push_back({f, d, fr.detections[d].score});
    valid[f].resize(fr.ground_truth.size());
    matched[f].assign(fr.ground_truth.size(), false);
    for (std::size_t g = 0; g < fr.ground_truth.size(); ++g) {
      valid[f][g] = in_difficulty(fr.ground_truth[g], cfg.difficulty);
      if (valid[f][g]) ++report.num_ground_truth;
    }
  }
  report.num_detections = order.size();
  std::stable_sort(order.begin(), order.end(), [](const Ref& a, const Ref& b) { return a.score > b.score; });

  std::size_t tp = 0, fp = 0;
  for (const auto& ref : order) {
    const auto& fr = frames[ref.frame];
    const Box3D& det = fr.detections[ref.det].box;
    double best_iou = -1.0;
    std::size_t best = fr.ground_truth.size();
    for (std::size_t g = 0; g < fr.ground_truth.size(); ++g) {
      if (matched[ref.frame][g]) continue;
      const double iou = cfg.view == IouView::Bev ? iou_bev(det, fr.ground_truth[g].box)
                                                  : iou_3d(det, fr.ground_truth[g].box);
      if (iou >= cfg.iou_threshold && iou > best_iou) {
        best_iou = iou;
        best = g;
      }
    }
    if (best == fr.ground_truth.size()) {
      ++fp;
    } else {
      matched[ref.frame][best] = true;
      if (!valid[ref.frame][best]) continue;
      ++tp;
    }
    const double recall = report.num_ground_truth ? double(tp) / double(report.num_ground_truth) : 0.0;
    report.curve.push_back({recall, double(tp) / double(tp + fp)});
  }
  report.true_positives = tp;
  report.false_positives = fp;
  report.ap = report.num_ground_truth ? interpolated_ap(report.curve, cfg.recall_points) : 0.0;
  return report;
}

DeltaRow attack_delta(const APReport& clean, const APReport& attacked) {
  if (!(clean.config == attacked.config)) {
    throw std::invalid_argument("attack_delta: reports were computed with different evaluation settings");
  }
  DeltaRow row;
  row.difficulty = clean.config.difficulty;
  row.clean_ap = clean.ap;
  row.attacked_ap = attacked.ap;
  row.absolute_drop = clean.ap - attacked.ap;
  row.relative_drop = clean.ap > 0.0 ? row.absolute_drop / clean.ap : 0.0;
  return row;
}

std::string format_table_text(const std::vector<TableRow>& rows) {
  std::size_t width = 11;
  for (const auto& r : rows) width = std::max(width, r.label.size());
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%-*s | %8s %9s %8s\n", int(width), "Attack Type", "Easy", "Moderate", "Hard");
  out += buf;
  out += std::string(width, '-') + "-+---------------------------\n";
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%-*s | %8.2f %9.2f %8.2f\n", int(width), r.label.c_str(), r.ap[0], r.ap[1],
                  r.ap[2]);
    out += buf;
  }
  return out;
}

std::string format_table_csv(const std::vector<TableRow>& rows) {
  std::string out = "attack,easy,moderate,hard\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%s,%.4f,%.4f,%.4f\n", r.label.c_str(), r.ap[0], r.ap[1], r.ap[2]);
    out += buf;
  }
  return out;
}

}  // namespace advmesh
