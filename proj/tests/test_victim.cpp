#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "advmesh/victim.hpp"
#include "oracles.hpp"

using namespace advmesh;

namespace {

std::vector<Vec3> random_points(oracle::Gen& g, std::size_t n, double spread) {
  std::vector<Vec3> pts(n);
  for (auto& p : pts) p = g.vec(-spread, spread);
  return pts;
}

Frustum frustum_of(const std::vector<Vec3>& pts) {
  Frustum f;
  f.points = pts;
  for (std::size_t i = 0; i < pts.size(); ++i) f.indices.push_back(i);
  return f;
}

// Points filling an axis-aligned box of the given (length along x, width along y, height).
std::vector<Vec3> fill_box(oracle::Gen& g, double l, double w, double h, std::size_t n) {
  std::vector<Vec3> pts(n);
  for (auto& p : pts) p = {g.uniform(-l / 2, l / 2), g.uniform(-w / 2, w / 2), g.uniform(-h / 2, h / 2)};
  return pts;
}

double yaw_diff_mod_pi(double a, double b) {
  double d = std::fmod(a - b, std::numbers::pi);
  if (d < 0) d += std::numbers::pi;
  return std::min(d, std::numbers::pi - d);
}

SynthConfig tiny_synth(int n, int cars, std::uint64_t seed) {
  SynthConfig s;
  s.num_scenes = n;
  s.cars_min = s.cars_max = cars;
  s.clutter_count = 0;
  s.seed = seed;
  return s;
}

}  // namespace

TEST_CASE("2D boxes and NMS") {
  Box2D a{0, 0, 10, 10}, b{5, 0, 15, 10};
  CHECK(iou_2d(a, b) == doctest::Approx(50.0 / 150.0));
  CHECK(iou_2d(a, a) == 1.0);
  CHECK(iou_2d(a, Box2D{20, 20, 30, 30}) == 0.0);

  oracle::Gen g(301);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Box2D> boxes;
    for (int i = 0; i < 40; ++i) {
      const double x = g.uniform(0, 100), y = g.uniform(0, 50);
      boxes.push_back({x, y, x + g.uniform(5, 30), y + g.uniform(5, 20), g.uniform(0, 1)});
    }
    const auto kept = nms(boxes, 0.5);
    for (std::size_t i = 0; i < kept.size(); ++i) {
      if (i > 0) CHECK(kept[i - 1].score >= kept[i].score);
      for (std::size_t j = i + 1; j < kept.size(); ++j) CHECK(iou_2d(kept[i], kept[j]) < 0.5);
    }
    // every dropped box overlaps a kept box with a higher or equal score
    for (const auto& bx : boxes) {
      bool present = std::any_of(kept.begin(), kept.end(), [&](const Box2D& k) { return k.left == bx.left && k.top == bx.top; });
      if (present) continue;
      bool covered = false;
      for (const auto& k : kept) covered = covered || (iou_2d(k, bx) >= 0.5 && k.score >= bx.score);
      CHECK(covered);
    }
  }
}

TEST_CASE("untrained scorer refuses to propose") {
  const Scorer2D s(ScorerConfig{}, 1);
  CHECK_THROWS_AS(propose_2d(Image(384, 128, 0.5), s), InvalidState);
}

TEST_CASE("scorer pixel gradient matches finite differences") {
  ScorerConfig cfg;
  cfg.stride = 8;
  cfg.window_width = 32;
  cfg.window_height = 16;
  cfg.pool_cols = 4;
  cfg.pool_rows = 2;
  cfg.hidden = 12;
  const Scorer2D scorer(cfg, 7);
  oracle::Gen g(303);
  Image img(48, 32);
  for (auto& v : img.data) v = g.uniform(0, 1);
  const auto fwd = scorer.forward(img);
  std::vector<double> w(fwd.scores.size());
  for (auto& v : w) v = g.uniform(-1, 1);
  const Image grad = scorer.backward(fwd, w);
  auto f = [&](const Image& im) {
    const auto ff = scorer.forward(im);
    double s = 0.0;
    for (std::size_t a = 0; a < w.size(); ++a) s += w[a] * ff.scores[a];
    return s;
  };
  double worst = 0.0;
  for (int k = 0; k < 200; ++k) {
    const std::size_t i = std::size_t(g.integer(0, int(img.data.size()) - 1));
    Image p = img, m = img;
    p.data[i] += 1e-5;
    m.data[i] -= 1e-5;
    worst = std::max(worst, oracle::rel_error(grad.data[i], (f(p) - f(m)) / 2e-5));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("extract_frustum matches a per-point oracle") {
  const Calibration calib = Calibration::synthetic(250.0, 192.0, 44.0);
  const CameraModel cam = calib.camera(384, 128);
  oracle::Gen g(307);
  PointCloud cloud;
  for (int i = 0; i < 3000; ++i) cloud.push_back({g.uniform(-20, 40), g.uniform(-20, 20), g.uniform(-2, 2)}, 0.1f);

  SUBCASE("whole image keeps every point in front of the camera that lands in it") {
    const Frustum f = extract_frustum(cloud, Box2D{-1e9, -1e9, 1e9, 1e9}, calib, cam);
    std::size_t expected = 0;
    for (const auto& p : cloud.points)
      if (calib.velo_to_cam(p).z > 0) ++expected;
    CHECK(f.indices.size() == expected);
  }
  SUBCASE("degenerate box is empty") {
    CHECK(extract_frustum(cloud, Box2D{100, 50, 100, 50}, calib, cam).empty());
  }
  SUBCASE("random boxes") {
    for (int trial = 0; trial < 20; ++trial) {
      const double l = g.uniform(0, 300), t = g.uniform(0, 100);
      const Box2D box{l, t, l + g.uniform(5, 120), t + g.uniform(5, 60)};
      const Frustum f = extract_frustum(cloud, box, calib, cam);
      std::vector<std::size_t> want;
      for (std::size_t i = 0; i < cloud.size(); ++i) {
        const Vec3 c = calib.velo_to_cam(cloud.points[i]);
        // independent homogeneous multiply with P2
        const auto& P = calib.p2;
        const double hw = P[8] * c.x + P[9] * c.y + P[10] * c.z + P[11];
        if (!(hw > 0) || !(c.z > 0)) continue;
        const double u = (P[0] * c.x + P[1] * c.y + P[2] * c.z + P[3]) / hw;
        const double v = (P[4] * c.x + P[5] * c.y + P[6] * c.z + P[7]) / hw;
        if (u >= box.left && u < box.right && v >= box.top && v < box.bottom) want.push_back(i);
      }
      CHECK(f.indices == want);
      Vec3 mean;
      for (auto i : want) mean += cloud.points[i];
      if (!want.empty()) mean = mean / double(want.size());
      for (std::size_t k = 0; k < f.indices.size(); ++k)
        CHECK(norm(f.points[k] + f.centroid - cloud.points[f.indices[k]]) < 1e-9);
      CHECK(norm(f.centroid - mean) < 1e-9);
    }
  }
}

TEST_CASE("sample_frustum keeps a seeded ordered subset") {
  oracle::Gen g(309);
  PointCloud cloud;
  for (int i = 0; i < 500; ++i) cloud.push_back(g.vec(-5, 5), 0.0f);
  const Frustum f = frustum_of(cloud.points);
  const Frustum s1 = sample_frustum(f, cloud, 100, 3), s2 = sample_frustum(f, cloud, 100, 3);
  CHECK(s1.indices.size() == 100);
  CHECK(s1.indices == s2.indices);
  CHECK(std::is_sorted(s1.indices.begin(), s1.indices.end()));
  CHECK(sample_frustum(f, cloud, 100, 4).indices != s1.indices);
  CHECK(sample_frustum(f, cloud, 1000, 4).indices == f.indices);
}

TEST_CASE("segment symmetries") {
  const SegNet net(16, 3);
  oracle::Gen g(311);
  auto pts = random_points(g, 30, 2.0);

  CHECK(segment(net, std::span<const Vec3>{}).logits.empty());

  const auto base = segment(net, pts);
  REQUIRE(base.logits.size() == pts.size());
  for (const auto& l : base.logits) {
    CHECK(std::isfinite(l[0]));
    CHECK(std::isfinite(l[1]));
  }

  auto dup = pts;
  dup.push_back(pts[7]);
  const auto d = segment(net, dup);
  CHECK(d.logits.back() == d.logits[7]);
  for (std::size_t i = 0; i < pts.size(); ++i) CHECK(d.logits[i] == base.logits[i]);

  std::vector<std::size_t> perm(pts.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), g.engine());
  std::vector<Vec3> shuffled;
  for (auto i : perm) shuffled.push_back(pts[i]);
  const auto s = segment(net, shuffled);
  for (std::size_t k = 0; k < perm.size(); ++k) CHECK(s.logits[k] == base.logits[perm[k]]);
}

TEST_CASE("segment_backward matches finite differences") {
  const SegNet net(16, 5);
  oracle::Gen g(313);
  const auto pts = random_points(g, 25, 2.0);
  std::vector<Logits> lg(pts.size());
  for (auto& l : lg) l = {g.uniform(-1, 1), g.uniform(-1, 1)};
  auto objective = [&](const std::vector<Vec3>& p) {
    const auto f = segment(net, p);
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) s += lg[i][0] * f.logits[i][0] + lg[i][1] * f.logits[i][1];
    return s;
  };
  const auto fwd = segment(net, pts);
  SegNet wgrad = net;
  wgrad.zero();
  const auto dx = segment_backward(net, fwd, lg, &wgrad);

  std::vector<double> x, analytic;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    x.insert(x.end(), {pts[i].x, pts[i].y, pts[i].z});
    analytic.insert(analytic.end(), {dx[i].x, dx[i].y, dx[i].z});
  }
  auto f = [&](const std::vector<double>& xs) {
    std::vector<Vec3> p(pts.size());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = {xs[3 * i], xs[3 * i + 1], xs[3 * i + 2]};
    return objective(p);
  };
  CHECK(oracle::max_rel_error(analytic, oracle::central_diff(f, x, 1e-6)) < 1e-4);

  // a sample of weight gradients in every layer
  SegNet probe = net;
  const auto layers = probe.layers();
  const auto glayers = wgrad.layers();
  double worst = 0.0;
  for (std::size_t L = 0; L < layers.size(); ++L) {
    for (int k = 0; k < 10; ++k) {
      const std::size_t i = std::size_t(g.integer(0, int(layers[L]->w.size()) - 1));
      const double keep = layers[L]->w[i];
      layers[L]->w[i] = keep + 1e-6;
      const double fp = [&] {
        const auto ff = segment(probe, pts);
        double s = 0.0;
        for (std::size_t j = 0; j < pts.size(); ++j) s += lg[j][0] * ff.logits[j][0] + lg[j][1] * ff.logits[j][1];
        return s;
      }();
      layers[L]->w[i] = keep - 1e-6;
      const double fm = [&] {
        const auto ff = segment(probe, pts);
        double s = 0.0;
        for (std::size_t j = 0; j < pts.size(); ++j) s += lg[j][0] * ff.logits[j][0] + lg[j][1] * ff.logits[j][1];
        return s;
      }();
      layers[L]->w[i] = keep;
      worst = std::max(worst, oracle::rel_error(glayers[L]->w[i], (fp - fm) / 2e-6));
    }
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("car probability and decision") {
  CHECK(car_probability({0.0, 0.0}) == 0.5);
  CHECK(is_car({0.0, 0.0}));
  CHECK_FALSE(is_car({10.0, -10.0}));
  CHECK(car_probability({1.0, 3.0}) == doctest::Approx(1.0 / (1.0 + std::exp(-2.0))));
}

TEST_CASE("estimate_box") {
  oracle::Gen g(317);
  SUBCASE("axis-aligned box fit") {
    const auto pts = fill_box(g, 2.0, 1.0, 1.5, 2000);
    const auto b = estimate_box(frustum_of(pts), std::vector<bool>(pts.size(), true));
    REQUIRE(b);
    CHECK(b->height == doctest::Approx(1.5).epsilon(0.05));
    CHECK(b->width == doctest::Approx(1.0).epsilon(0.05));
    CHECK(b->length == doctest::Approx(2.0).epsilon(0.05));
    CHECK(yaw_diff_mod_pi(b->yaw, 0.0) < 0.05);
    CHECK(b->yaw > -std::numbers::pi);
    CHECK(b->yaw <= std::numbers::pi);
  }
  SUBCASE("rotation equivariance") {
    const auto pts = fill_box(g, 2.0, 1.0, 1.5, 1000);
    const auto b0 = estimate_box(frustum_of(pts), std::vector<bool>(pts.size(), true));
    std::vector<Vec3> rot;
    const double angle = std::numbers::pi / 6;
    for (const auto& p : pts) rot.push_back(oracle::rotate_z_by_hand(angle, p));
    const auto b1 = estimate_box(frustum_of(rot), std::vector<bool>(rot.size(), true));
    REQUIRE(b0);
    REQUIRE(b1);
    CHECK(yaw_diff_mod_pi(b1->yaw, b0->yaw + angle) < 1e-9);
    CHECK(b1->length == doctest::Approx(b0->length).epsilon(1e-9));
    CHECK(b1->width == doctest::Approx(b0->width).epsilon(1e-9));
  }
  SUBCASE("translation equivariance") {
    for (int trial = 0; trial < 10; ++trial) {
      const auto pts = fill_box(g, g.uniform(1, 4), g.uniform(0.5, 1.5), g.uniform(0.5, 1.5), 300);
      const Vec3 shift = g.vec(-20, 20);
      std::vector<Vec3> moved;
      for (const auto& p : pts) moved.push_back(p + shift);
      const std::vector<bool> mask(pts.size(), true);
      const auto a = estimate_box(frustum_of(pts), mask), b = estimate_box(frustum_of(moved), mask);
      REQUIRE(a);
      REQUIRE(b);
      CHECK(norm(b->center - (a->center + shift)) < 1e-9);
      CHECK(std::abs(b->length - a->length) < 1e-9);
      CHECK(std::abs(b->width - a->width) < 1e-9);
      CHECK(std::abs(b->height - a->height) < 1e-9);
      CHECK(yaw_diff_mod_pi(a->yaw, b->yaw) < 1e-9);
    }
  }
  SUBCASE("too few masked points") {
    const auto pts = fill_box(g, 0.5, 0.5, 0.5, 20);
    std::vector<bool> mask(pts.size(), false);
    for (int i = 0; i < 7; ++i) mask[i] = true;
    CHECK_FALSE(estimate_box(frustum_of(pts), mask));
    mask[7] = true;
    CHECK(estimate_box(frustum_of(pts), mask));
  }
  SUBCASE("centroid offset is restored") {
    const auto pts = fill_box(g, 2, 1, 1, 200);
    Frustum f = frustum_of(pts);
    f.centroid = {10, -3, 1};
    const auto b = estimate_box(f, std::vector<bool>(pts.size(), true));
    REQUIRE(b);
    CHECK(norm(b->center - Vec3{10, -3, 1}) < 0.1);
  }
}

TEST_CASE("cascade: every 3D detection has a generating 2D box") {
  const auto scenes = gen_synthetic(tiny_synth(6, 2, 5));
  Victim v;
  v.seg = SegNet(16, 2);
  // a constant car bias makes every frustum point a car point
  v.seg.cls2.b = {-5.0, 5.0};
  for (const auto& scene : scenes) {
    std::vector<Box2D> boxes;
    for (const auto& gt : scene.objects) boxes.push_back(gt.box2d);
    const auto dets = detect(v, scene.cloud, boxes, scene.calib, scene.camera(), scene.id, 1);
    CHECK(!dets.empty());
    for (std::size_t i = 0; i < dets.size(); ++i) {
      REQUIRE(dets[i].source_index < boxes.size());
      CHECK(dets[i].proposal.left == boxes[dets[i].source_index].left);
      if (i > 0) CHECK(dets[i - 1].score >= dets[i].score);
      for (std::size_t j = 0; j < i; ++j) CHECK(iou_bev(dets[i].box, dets[j].box) < v.cfg.bev_nms_iou);
    }
    CHECK(detect(v, scene.cloud, {}, scene.calib, scene.camera(), scene.id, 1).empty());
  }
}

TEST_CASE("seeded segmentation training is reproducible") {
  const auto scenes = gen_synthetic(tiny_synth(4, 1, 9));
  VictimTrainConfig cfg;
  cfg.seg_epochs = 2;
  cfg.seed = 21;
  Victim a;
  a.cfg.seg_hidden = 16;
  a.seg = SegNet(16, 1);
  Victim b = a;
  train_segnet(a, scenes, cfg);
  train_segnet(b, scenes, cfg);
  const auto la = a.seg.layers(), lb = b.seg.layers();
  for (std::size_t i = 0; i < la.size(); ++i) {
    CHECK(la[i]->w == lb[i]->w);
    CHECK(la[i]->b == lb[i]->b);
  }
}

TEST_CASE("victim checkpoint round trip") {
  Victim v;
  v.scorer = Scorer2D(v.cfg.scorer, 4);
  v.scorer.set_trained(true);
  v.seg = SegNet(v.cfg.seg_hidden, 4);
  const Victim r = victim_from_checkpoint(victim_checkpoint(v));
  CHECK(r.trained());
  const auto a = v.seg.layers();
  const auto b = r.seg.layers();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i]->w == b[i]->w);
  const auto sa = v.scorer.layers();
  const auto sb = r.scorer.layers();
  for (std::size_t i = 0; i < sa.size(); ++i) CHECK(sa[i]->w == sb[i]->w);
  CHECK(to_json(r.cfg) == to_json(v.cfg));
}

TEST_CASE("trained scorer sanity") {
  // Small training budget: enough for isolated single cars on a clean background.
  SynthConfig sc = tiny_synth(100, 1, 41);
  sc.clutter_count = 3;
  const auto train = gen_synthetic(sc);
  Scorer2D scorer(ScorerConfig{}, 1);
  VictimTrainConfig cfg;
  cfg.scorer_epochs = 20;
  train_scorer(scorer, train, cfg);
  REQUIRE(scorer.trained());

  const Scene blank = gen_synthetic_scene(tiny_synth(1, 0, 43), 0);
  CHECK(blank.objects.empty());
  CHECK(propose_2d(blank.image, scorer).empty());

  int found = 0, total = 0;
  for (int i = 0; i < 10; ++i) {
    const Scene s = gen_synthetic_scene(tiny_synth(10, 1, 47), i);
    if (s.objects.empty()) continue;
    ++total;
    for (const auto& p : propose_2d(s.image, scorer))
      if (iou_2d(p, s.objects[0].box2d) >= 0.5) {
        ++found;
        break;
      }
  }
  MESSAGE("single-car scenes with a matching proposal: " << found << " / " << total);
  CHECK(total > 0);
  CHECK(found * 10 >= total * 8);
}
