#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "advmesh/json_util.hpp"
#include "advmesh/victim.hpp"

namespace advmesh {
namespace {

constexpr std::uint64_t kEvalSeed = 0x5eed;

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// One Adam state per weight and bias vector of each layer.
struct LayerOptimizer {
  std::vector<AdamState> states;

  LayerOptimizer(const std::vector<const Dense*>& layers, double lr) {
    AdamConfig cfg;
    cfg.lr = lr;
    for (const auto* l : layers) {
      states.emplace_back(cfg, l->w.size());
      states.emplace_back(cfg, l->b.size());
    }
  }
  void step(const std::vector<Dense*>& layers, const std::vector<Dense*>& grads, double scale) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      for (auto& g : grads[i]->w) g *= scale;
      for (auto& g : grads[i]->b) g *= scale;
      adam_update(layers[i]->w, grads[i]->w, states[2 * i]);
      adam_update(layers[i]->b, grads[i]->b, states[2 * i + 1]);
    }
  }
};

void require_finite(double loss, const char* stage, int epoch, std::size_t batch) {
  if (std::isfinite(loss)) return;
  std::ostringstream msg;
  msg << stage << " training diverged: non-finite loss at epoch " << epoch << ", batch " << batch;
  throw TrainingError(msg.str());
}

Image flip_horizontal(const Image& img) {
  Image out(img.width, img.height);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) out.set_pixel(img.width - 1 - x, y, img.pixel(x, y));
  return out;
}

struct ScorerSample {
  std::size_t feature_offset;
  bool positive;
  std::array<double, 4> target;
};

std::vector<const Dense*> const_layers(const std::vector<Dense*>& v) { return {v.begin(), v.end()}; }

}  // namespace

Box2D expand_box(const Box2D& box, const VictimConfig& cfg) {
  Box2D out = box;
  const double w = box.width(), h = box.height();
  out.left -= cfg.expand_side * w;
  out.right += cfg.expand_side * w;
  out.top -= cfg.expand_top * h;
  out.bottom += cfg.expand_bottom * h;
  return out;
}

std::uint64_t frustum_seed(std::uint64_t base, const std::string& scene_id, std::size_t box_index) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : scene_id) h = (h ^ c) * 1099511628211ull;
  return splitmix(base ^ splitmix(h ^ splitmix(box_index)));
}

FrustumPass run_frustum(const Victim& victim, const PointCloud& cloud, const Box2D& box2d, const Calibration& calib,
                        const CameraModel& cam, std::uint64_t seed) {
  FrustumPass pass;
  pass.box = box2d;
  const Frustum full = extract_frustum(cloud, expand_box(box2d, victim.cfg), calib, cam);
  pass.frustum = sample_frustum(full, cloud, victim.cfg.frustum_points, seed);
  pass.frustum.box = box2d;
  if (pass.frustum.empty()) return pass;
  pass.seg = segment(victim.seg, pass.frustum.points);
  std::vector<bool> mask(pass.seg.logits.size());
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = is_car(pass.seg.logits[i]);
  pass.estimate = estimate_box(pass.frustum, mask);
  return pass;
}

std::vector<Detection3D> detect(const Victim& victim, const PointCloud& cloud, const std::vector<Box2D>& boxes2d,
                                const Calibration& calib, const CameraModel& cam, const std::string& scene_id,
                                std::uint64_t seed) {
  std::vector<Detection3D> out;
  for (std::size_t b = 0; b < boxes2d.size(); ++b) {
    const FrustumPass pass = run_frustum(victim, cloud, boxes2d[b], calib, cam, frustum_seed(seed, scene_id, b));
    if (!pass.estimate) continue;
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& l : pass.seg.logits) {
      if (!is_car(l)) continue;
      sum += car_probability(l);
      ++n;
    }
    out.push_back({*pass.estimate, boxes2d[b].score * sum / double(n), boxes2d[b], b});
  }
  std::stable_sort(out.begin(), out.end(), [](const Detection3D& a, const Detection3D& b) { return a.score > b.score; });
  std::vector<Detection3D> kept;
  for (const auto& d : out) {
    bool keep = true;
    for (const auto& k : kept) keep = keep && iou_bev(d.box, k.box) < victim.cfg.bev_nms_iou;
    if (keep) kept.push_back(d);
  }
  return kept;
}

std::vector<FrameEval> detect_frames(const Victim& victim, const std::vector<Scene>& scenes, FrustumSource source,
                                     std::uint64_t seed) {
  std::vector<FrameEval> frames;
  for (const auto& scene : scenes) {
    std::vector<Box2D> boxes;
    if (source == FrustumSource::GroundTruth) {
      for (const auto& gt : scene.objects) {
        Box2D b = gt.box2d;
        b.score = 1.0;
        boxes.push_back(b);
      }
    } else {
      boxes = propose_2d(scene.image, victim.scorer);
    }
    FrameEval fe;
    fe.ground_truth = scene.objects;
    for (const auto& d : detect(victim, scene.cloud, boxes, scene.calib, scene.camera(), scene.id, seed))
      fe.detections.push_back({d.box, d.score});
    frames.push_back(std::move(fe));
  }
  return frames;
}

double proposal_recall(const Victim& victim, const std::vector<Scene>& scenes, double iou, Difficulty difficulty) {
  std::size_t total = 0, found = 0;
  for (const auto& scene : scenes) {
    const auto props = propose_2d(scene.image, victim.scorer);
    for (const auto& gt : scene.objects) {
      if (!in_difficulty(gt, difficulty)) continue;
      ++total;
      for (const auto& p : props)
        if (iou_2d(p, gt.box2d) >= iou) {
          ++found;
          break;
        }
    }
  }
  return total ? double(found) / double(total) : 0.0;
}

void train_scorer(Scorer2D& scorer, const std::vector<Scene>& scenes, const VictimTrainConfig& cfg) {
  const ScorerConfig& sc = scorer.config();
  const int nf = sc.feature_count();
  std::vector<double> features;
  std::vector<ScorerSample> samples;
  std::vector<double> buf;
  for (const auto& scene : scenes) {
    for (int flip = 0; flip < 2; ++flip) {
      const Image img = flip ? flip_horizontal(scene.image) : scene.image;
      const auto anchors = scorer.anchors(img.width, img.height);
      scorer.pooled_features(img, anchors, buf);
      for (std::size_t a = 0; a < anchors.size(); ++a) {
        const Anchor& an = anchors[a];
        int label = 0;  // 0 negative, 1 positive, -1 ignored
        std::array<double, 4> target{};
        for (const auto& gt : scene.objects) {
          Box2D b = gt.box2d;
          if (flip) {
            const double l = img.width - b.right, r = img.width - b.left;
            b.left = l;
            b.right = r;
          }
          const double gcx = 0.5 * (b.left + b.right), gcy = 0.5 * (b.top + b.bottom);
          const double dx = std::abs(gcx - an.cx), dy = std::abs(gcy - an.cy);
          if (dx <= 0.5 * sc.stride && dy <= 0.5 * sc.stride) {
            label = 1;
            target = {(gcx - an.cx) / (0.5 * sc.window_width), (gcy - an.cy) / (0.5 * sc.window_height),
                      std::log(b.width() / sc.window_width), std::log(b.height() / sc.window_height)};
            break;
          }
          if (dx <= sc.stride && dy <= sc.stride) label = -1;
        }
        if (label < 0) continue;
        samples.push_back({features.size(), label == 1, target});
        features.insert(features.end(), buf.begin() + a * nf, buf.begin() + (a + 1) * nf);
      }
    }
  }
  if (samples.empty()) throw TrainingError("scorer training: no samples");

  Scorer2D grads = scorer;
  grads.zero();
  LayerOptimizer opt(const_layers(scorer.layers()), cfg.scorer_lr);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> hidden(sc.hidden);
  const std::size_t batch = std::max(1, cfg.scorer_batch);
  for (int epoch = 0; epoch < cfg.scorer_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0, bi = 0; start < order.size(); start += batch, ++bi) {
      const std::size_t end = std::min(order.size(), start + batch);
      grads.zero();
      double loss = 0.0;
      for (std::size_t k = start; k < end; ++k) {
        const ScorerSample& s = samples[order[k]];
        const double* f = features.data() + s.feature_offset;
        double t[4];
        const double logit = scorer.head_forward(f, hidden.data(), t);
        const double p = 1.0 / (1.0 + std::exp(-logit));
        const double w = s.positive ? cfg.positive_weight : 1.0;
        const double y = s.positive ? 1.0 : 0.0;
        // log(1 + e^x) - y x, stable
        loss += w * (std::max(logit, 0.0) + std::log1p(std::exp(-std::abs(logit))) - y * logit);
        double dbox[4] = {0, 0, 0, 0};
        if (s.positive) {
          for (int i = 0; i < 4; ++i) {
            dbox[i] = t[i] - s.target[i];
            loss += 0.5 * dbox[i] * dbox[i];
          }
        }
        scorer.head_backward(f, hidden.data(), w * (p - y), s.positive ? dbox : nullptr, &grads, nullptr);
      }
      require_finite(loss, "scorer", epoch, bi);
      opt.step(scorer.layers(), grads.layers(), 1.0 / double(end - start));
    }
  }
  scorer.set_trained(true);
}

namespace {

struct SegExample {
  Frustum frustum;
  std::vector<int> labels;
};

// Points are labeled car only when they belong to the object that produced the frustum.
SegExample make_seg_example(const Victim& victim, const Scene& scene, const Box2D& box, const Box3D& object,
                            std::uint64_t seed) {
  SegExample ex;
  const Frustum full = extract_frustum(scene.cloud, expand_box(box, victim.cfg), scene.calib, scene.camera());
  ex.frustum = sample_frustum(full, scene.cloud, victim.cfg.frustum_points, seed);
  for (auto idx : ex.frustum.indices)
    ex.labels.push_back(object.contains(scene.cloud.points[idx], victim.cfg.label_margin) ? 1 : 0);
  return ex;
}

}  // namespace

void train_segnet(Victim& victim, const std::vector<Scene>& scenes, const VictimTrainConfig& cfg,
                  double* final_loss) {
  struct Item {
    std::size_t scene, object;
  };
  std::vector<Item> items;
  for (std::size_t s = 0; s < scenes.size(); ++s)
    for (std::size_t o = 0; o < scenes[s].objects.size(); ++o) items.push_back({s, o});
  if (items.empty()) throw TrainingError("segmentation training: no labeled cars");

  SegNet grads = victim.seg;
  LayerOptimizer opt(const_layers(victim.seg.layers()), cfg.seg_lr);
  std::mt19937_64 rng(cfg.seed ^ 0x5e9ull);
  std::uniform_real_distribution<double> jitter(-cfg.box_jitter, cfg.box_jitter);
  const std::size_t batch = std::max(1, cfg.seg_batch);
  double epoch_loss = 0.0;
  for (int epoch = 0; epoch < cfg.seg_epochs; ++epoch) {
    std::shuffle(items.begin(), items.end(), rng);
    epoch_loss = 0.0;
    std::size_t epoch_count = 0;
    for (std::size_t start = 0, bi = 0; start < items.size(); start += batch, ++bi) {
      const std::size_t end = std::min(items.size(), start + batch);
      grads.zero();
      double loss = 0.0;
      std::size_t used = 0;
      for (std::size_t k = start; k < end; ++k) {
        const Scene& scene = scenes[items[k].scene];
        Box2D b = scene.objects[items[k].object].box2d;
        const double w = b.width(), h = b.height();
        b.left += jitter(rng) * w;
        b.right += jitter(rng) * w;
        b.top += jitter(rng) * h;
        b.bottom += jitter(rng) * h;
        const std::uint64_t seed = rng();
        if (!(b.left < b.right && b.top < b.bottom)) continue;
        const SegExample ex = make_seg_example(victim, scene, b, scene.objects[items[k].object].box, seed);
        if (ex.frustum.indices.size() < kMinBoxPoints) continue;
        const SegForward fwd = segment(victim.seg, ex.frustum.points);
        const double inv_n = 1.0 / double(ex.labels.size());
        std::vector<Logits> dl(ex.labels.size());
        for (std::size_t i = 0; i < ex.labels.size(); ++i) {
          const auto& l = fwd.logits[i];
          const double m = std::max(l[0], l[1]);
          const double lse = m + std::log(std::exp(l[0] - m) + std::exp(l[1] - m));
          loss += (lse - l[ex.labels[i]]) * inv_n;
          const double p1 = car_probability(l);
          dl[i] = {((1.0 - p1) - (ex.labels[i] == 0 ? 1.0 : 0.0)) * inv_n,
                   (p1 - (ex.labels[i] == 1 ? 1.0 : 0.0)) * inv_n};
        }
        segment_backward(victim.seg, fwd, dl, &grads);
        ++used;
      }
      require_finite(loss, "segmentation", epoch, bi);
      if (used == 0) continue;
      epoch_loss += loss;
      epoch_count += used;
      opt.step(victim.seg.layers(), grads.layers(), 1.0 / double(used));
    }
    if (epoch_count) epoch_loss /= double(epoch_count);
  }
  if (final_loss) *final_loss = epoch_loss;
}

double segmentation_accuracy(const Victim& victim, const std::vector<Scene>& scenes, std::uint64_t seed) {
  std::size_t correct = 0, total = 0;
  for (const auto& scene : scenes) {
    for (std::size_t o = 0; o < scene.objects.size(); ++o) {
      const SegExample ex = make_seg_example(victim, scene, scene.objects[o].box2d, scene.objects[o].box,
                                              frustum_seed(seed, scene.id, o));
      if (ex.labels.empty()) continue;
      const SegForward fwd = segment(victim.seg, ex.frustum.points);
      for (std::size_t i = 0; i < ex.labels.size(); ++i) {
        correct += (is_car(fwd.logits[i]) ? 1 : 0) == ex.labels[i];
        ++total;
      }
    }
  }
  return total ? double(correct) / double(total) : 0.0;
}

Victim train_victim(const std::vector<Scene>& train, const std::vector<Scene>& val, const VictimConfig& vcfg,
                    const VictimTrainConfig& cfg, VictimReport* report) {
  Victim victim;
  victim.cfg = vcfg;
  victim.scorer = Scorer2D(vcfg.scorer, cfg.seed);
  victim.seg = SegNet(vcfg.seg_hidden, cfg.seed + 1);
  train_scorer(victim.scorer, train, cfg);
  double seg_loss = 0.0;
  train_segnet(victim, train, cfg, &seg_loss);
  if (report) {
    report->final_seg_loss = seg_loss;
    report->seg_accuracy = segmentation_accuracy(victim, val, kEvalSeed);
    EvalConfig ec;
    ec.iou_threshold = 0.5;
    report->clean_bev_ap = average_precision(detect_frames(victim, val, FrustumSource::Detector, kEvalSeed), ec).ap;
    report->scorer_recall = proposal_recall(victim, val);
  }
  return victim;
}

Checkpoint victim_checkpoint(const Victim& victim) {
  Checkpoint ckpt;
  ckpt.meta["kind"] = "victim";
  ckpt.meta["config"] = to_json(victim.cfg);
  ckpt.meta["trained"] = victim.trained();
  for (auto& b : victim.scorer.export_blocks("scorer.")) ckpt.blocks.push_back(std::move(b));
  static const char* names[] = {"enc1", "enc2", "cls1", "cls2"};
  const auto ls = victim.seg.layers();
  for (std::size_t i = 0; i < ls.size(); ++i) {
    ParamBlock w(std::string("seg.") + names[i] + ".w", {std::size_t(ls[i]->out), std::size_t(ls[i]->in)});
    std::copy(ls[i]->w.begin(), ls[i]->w.end(), w.values().begin());
    ParamBlock b(std::string("seg.") + names[i] + ".b", {std::size_t(ls[i]->out)});
    std::copy(ls[i]->b.begin(), ls[i]->b.end(), b.values().begin());
    ckpt.blocks.push_back(std::move(w));
    ckpt.blocks.push_back(std::move(b));
  }
  return ckpt;
}

Victim victim_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.meta.value("kind", "") != "victim") throw std::runtime_error("checkpoint does not hold a victim model");
  Victim v;
  v.cfg = victim_config_from_json(ckpt.meta.at("config"));
  v.scorer = Scorer2D(v.cfg.scorer);
  v.scorer.import_blocks(ckpt, "scorer.");
  v.scorer.set_trained(ckpt.meta.value("trained", false));
  v.seg = SegNet(v.cfg.seg_hidden);
  static const char* names[] = {"enc1", "enc2", "cls1", "cls2"};
  const auto ls = v.seg.layers();
  for (std::size_t i = 0; i < ls.size(); ++i) {
    const auto& w = ckpt.block(std::string("seg.") + names[i] + ".w");
    const auto& b = ckpt.block(std::string("seg.") + names[i] + ".b");
    if (w.size() != ls[i]->w.size() || b.size() != ls[i]->b.size())
      throw std::runtime_error("checkpoint block " + w.name() + " does not match the SegNet width");
    std::copy(w.values().begin(), w.values().end(), ls[i]->w.begin());
    std::copy(b.values().begin(), b.values().end(), ls[i]->b.begin());
  }
  return v;
}

nlohmann::json to_json(const VictimConfig& c) {
  return {{"scorer",
           {{"stride", c.scorer.stride},
            {"window_width", c.scorer.window_width},
            {"window_height", c.scorer.window_height},
            {"pool_cols", c.scorer.pool_cols},
            {"pool_rows", c.scorer.pool_rows},
            {"hidden", c.scorer.hidden},
            {"threshold", c.scorer.threshold},
            {"nms_iou", c.scorer.nms_iou}}},
          {"seg_hidden", c.seg_hidden},
          {"frustum_points", c.frustum_points},
          {"expand_top", c.expand_top},
          {"expand_side", c.expand_side},
          {"expand_bottom", c.expand_bottom},
          {"label_margin", c.label_margin},
          {"bev_nms_iou", c.bev_nms_iou}};
}

VictimConfig victim_config_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j, {"scorer", "seg_hidden", "frustum_points", "expand_top", "expand_side", "expand_bottom",
                          "label_margin", "bev_nms_iou"},
                      "victim");
  VictimConfig c;
  if (j.contains("scorer")) {
    const auto& s = j.at("scorer");
    reject_unknown_keys(s, {"stride", "window_width", "window_height", "pool_cols", "pool_rows", "hidden",
                            "threshold", "nms_iou"},
                        "victim.scorer");
    read_key(s, "stride", c.scorer.stride);
    read_key(s, "window_width", c.scorer.window_width);
    read_key(s, "window_height", c.scorer.window_height);
    read_key(s, "pool_cols", c.scorer.pool_cols);
    read_key(s, "pool_rows", c.scorer.pool_rows);
    read_key(s, "hidden", c.scorer.hidden);
    read_key(s, "threshold", c.scorer.threshold);
    read_key(s, "nms_iou", c.scorer.nms_iou);
  }
  read_key(j, "seg_hidden", c.seg_hidden);
  read_key(j, "frustum_points", c.frustum_points);
  read_key(j, "expand_top", c.expand_top);
  read_key(j, "expand_side", c.expand_side);
  read_key(j, "expand_bottom", c.expand_bottom);
  read_key(j, "label_margin", c.label_margin);
  read_key(j, "bev_nms_iou", c.bev_nms_iou);
  if (c.scorer.stride <= 0 || c.scorer.pool_cols <= 0 || c.scorer.pool_rows <= 0 || c.scorer.hidden <= 0 ||
      c.seg_hidden <= 0 || c.frustum_points == 0)
    throw std::invalid_argument("victim: sizes must be positive");
  return c;
}

nlohmann::json to_json(const VictimTrainConfig& c) {
  return {{"scorer_epochs", c.scorer_epochs}, {"scorer_lr", c.scorer_lr},
          {"scorer_batch", c.scorer_batch},   {"positive_weight", c.positive_weight},
          {"seg_epochs", c.seg_epochs},       {"seg_lr", c.seg_lr},
          {"seg_batch", c.seg_batch},         {"box_jitter", c.box_jitter},
          {"seed", c.seed}};
}

VictimTrainConfig victim_train_config_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j, {"scorer_epochs", "scorer_lr", "scorer_batch", "positive_weight", "seg_epochs", "seg_lr",
                          "seg_batch", "box_jitter", "seed"},
                      "victim_training");
  VictimTrainConfig c;
  read_key(j, "scorer_epochs", c.scorer_epochs);
  read_key(j, "scorer_lr", c.scorer_lr);
  read_key(j, "scorer_batch", c.scorer_batch);
  read_key(j, "positive_weight", c.positive_weight);
  read_key(j, "seg_epochs", c.seg_epochs);
  read_key(j, "seg_lr", c.seg_lr);
  read_key(j, "seg_batch", c.seg_batch);
  read_key(j, "box_jitter", c.box_jitter);
  read_key(j, "seed", c.seed);
  if (c.scorer_epochs < 0 || c.seg_epochs < 0 || c.scorer_batch < 1 || c.seg_batch < 1)
    throw std::invalid_argument("victim_training: epochs must be >= 0 and batches >= 1");
  return c;
}

}  // namespace advmesh
