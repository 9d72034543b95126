#include "advmesh/attack.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <stdexcept>

#include "advmesh/eval.hpp"
#include "advmesh/json_util.hpp"
#include "advmesh/parallel.hpp"

namespace advmesh {
namespace {

constexpr double kDeg = std::numbers::pi / 180.0;
constexpr double kProposalMatchIou = 0.5;

nlohmann::json lidar_to_json(const LidarConfig& c) {
  nlohmann::json elev = nlohmann::json::array();
  for (double e : c.elevations) elev.push_back(e / kDeg);
  return {{"elevations_deg", elev},
          {"azimuth_step_deg", c.azimuth_step / kDeg},
          {"azimuth_start_deg", c.azimuth_start / kDeg},
          {"azimuth_end_deg", c.azimuth_end / kDeg},
          {"origin", {c.origin.x, c.origin.y, c.origin.z}},
          {"noise_std", c.noise_std},
          {"max_range", c.max_range},
          {"seed", c.seed}};
}

LidarConfig lidar_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j, {"elevations_deg", "beams", "elevation_min_deg", "elevation_max_deg", "azimuth_step_deg",
                          "azimuth_start_deg", "azimuth_end_deg", "origin", "noise_std", "max_range", "seed"},
                      "attack.lidar");
  LidarConfig c = LidarConfig::kitti_default();
  if (j.contains("elevations_deg")) {
    c.elevations.clear();
    for (double e : j.at("elevations_deg")) c.elevations.push_back(e * kDeg);
  } else if (j.contains("beams") || j.contains("elevation_min_deg") || j.contains("elevation_max_deg")) {
    const int beams = j.value("beams", 64);
    const double lo = j.value("elevation_min_deg", -24.8), hi = j.value("elevation_max_deg", 2.0);
    c.elevations.clear();
    for (int i = 0; i < beams; ++i) c.elevations.push_back((lo + (hi - lo) * i / std::max(beams - 1, 1)) * kDeg);
  }
  if (j.contains("azimuth_step_deg")) c.azimuth_step = j.at("azimuth_step_deg").get<double>() * kDeg;
  if (j.contains("azimuth_start_deg")) c.azimuth_start = j.at("azimuth_start_deg").get<double>() * kDeg;
  if (j.contains("azimuth_end_deg")) c.azimuth_end = j.at("azimuth_end_deg").get<double>() * kDeg;
  if (j.contains("origin")) {
    const auto& o = j.at("origin");
    c.origin = {o.at(0).get<double>(), o.at(1).get<double>(), o.at(2).get<double>()};
  }
  read_key(j, "noise_std", c.noise_std);
  read_key(j, "max_range", c.max_range);
  read_key(j, "seed", c.seed);
  c.validate();
  return c;
}

bool bit_equal(std::span<const double> a, const std::vector<double>& b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](double x, double y) {
           return std::bit_cast<std::uint64_t>(x) == std::bit_cast<std::uint64_t>(y);
         });
}

// 2D boxes feeding the frustums, each tied to the ground-truth car it stands for.
struct FrustumInput {
  Box2D box;
  std::size_t object;
};

std::vector<FrustumInput> frustum_inputs(const Scene& scene, const Image& image, const Victim& victim,
                                         FrustumSource source) {
  std::vector<FrustumInput> out;
  if (source == FrustumSource::GroundTruth) {
    for (std::size_t k = 0; k < scene.objects.size(); ++k) {
      Box2D b = scene.objects[k].box2d;
      b.score = 1.0;
      out.push_back({b, k});
    }
    return out;
  }
  for (const auto& p : propose_2d(image, victim.scorer)) {
    double best = kProposalMatchIou;
    std::optional<std::size_t> match;
    for (std::size_t k = 0; k < scene.objects.size(); ++k) {
      const double iou = iou_2d(p, scene.objects[k].box2d);
      if (iou >= best) {
        best = iou;
        match = k;
      }
    }
    if (match) out.push_back({p, *match});
  }
  return out;
}

}  // namespace

const char* phase_name(AttackPhase p) { return p == AttackPhase::Shape ? "shape" : "texture"; }

AttackPhase parse_phase(const std::string& s) {
  if (s == "shape") return AttackPhase::Shape;
  if (s == "texture") return AttackPhase::Texture;
  throw std::invalid_argument("unknown attack phase '" + s + "' (expected shape or texture)");
}

const char* frustum_source_name(FrustumSource s) {
  return s == FrustumSource::GroundTruth ? "ground_truth" : "detector";
}

FrustumSource parse_frustum_source(const std::string& s) {
  if (s == "ground_truth") return FrustumSource::GroundTruth;
  if (s == "detector") return FrustumSource::Detector;
  throw std::invalid_argument("unknown frustum source '" + s + "' (expected ground_truth or detector)");
}

void AttackConfig::validate() const {
  if (!(lambda >= 0.0)) throw std::invalid_argument("attack: lambda must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("attack: batch size must be >= 1");
  if (shape_epochs < 0 || texture_epochs < 0) throw std::invalid_argument("attack: epochs must be >= 0");
  if (!(extents.x > 0 && extents.y > 0 && extents.z > 0)) throw std::invalid_argument("attack: extents must be > 0");
  if (!(shape_lr > 0.0) || !(texture_lr > 0.0)) throw std::invalid_argument("attack: learning rates must be > 0");
  if (subdivisions < 0 || !(radius > 0.0)) throw std::invalid_argument("attack: invalid icosphere settings");
  lidar.validate();
}

nlohmann::json to_json(const AttackConfig& c) {
  return {{"lambda", c.lambda},
          {"phase", phase_name(c.phase)},
          {"shape_epochs", c.shape_epochs},
          {"texture_epochs", c.texture_epochs},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"extents", {c.extents.x, c.extents.y, c.extents.z}},
          {"shape_lr", c.shape_lr},
          {"texture_lr", c.texture_lr},
          {"frustum_source", frustum_source_name(c.frustum_source)},
          {"clearance", c.clearance},
          {"occlusion_cull", c.occlusion_cull},
          {"subdivisions", c.subdivisions},
          {"radius", c.radius},
          {"image_score_floor", c.image_score_floor},
          {"image_match_iou", c.image_match_iou},
          {"lidar", lidar_to_json(c.lidar)},
          {"threads", c.threads}};
}

AttackConfig attack_config_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j, {"lambda", "phase", "shape_epochs", "texture_epochs", "batch_size", "seed", "extents", "shape_lr", "texture_lr",
                          "frustum_source", "clearance", "occlusion_cull", "subdivisions", "radius", "image_score_floor",
                          "image_match_iou", "lidar", "threads"},
                      "attack");
  AttackConfig c;
  read_key(j, "lambda", c.lambda);
  if (j.contains("phase")) c.phase = parse_phase(j.at("phase").get<std::string>());
  read_key(j, "shape_epochs", c.shape_epochs);
  read_key(j, "texture_epochs", c.texture_epochs);
  read_key(j, "batch_size", c.batch_size);
  read_key(j, "seed", c.seed);
  if (j.contains("extents")) {
    const auto& e = j.at("extents");
    c.extents = {e.at(0).get<double>(), e.at(1).get<double>(), e.at(2).get<double>()};
  }
  read_key(j, "shape_lr", c.shape_lr);
  read_key(j, "texture_lr", c.texture_lr);
  if (j.contains("frustum_source")) c.frustum_source = parse_frustum_source(j.at("frustum_source").get<std::string>());
  read_key(j, "clearance", c.clearance);
  read_key(j, "occlusion_cull", c.occlusion_cull);
  read_key(j, "subdivisions", c.subdivisions);
  read_key(j, "radius", c.radius);
  read_key(j, "image_score_floor", c.image_score_floor);
  read_key(j, "image_match_iou", c.image_match_iou);
  if (j.contains("lidar")) c.lidar = lidar_from_json(j.at("lidar"));
  read_key(j, "threads", c.threads);
  c.validate();
  return c;
}

AttackParams AttackParams::initial(int subdivisions, double radius) {
  AttackParams p;
  p.base = make_icosphere(subdivisions, radius);
  const std::size_t n = p.base.vertices.size();
  p.displacement = ParamBlock("displacement", {n, 3}, 0.0);
  p.colors = ParamBlock("colors", {n, 3}, 0.5);
  p.colors.set_bounds(0.0, 1.0);
  p.colors.assign_vec3(p.base.colors);
  return p;
}

TriMesh AttackParams::object_mesh() const {
  TriMesh m = base;
  const auto d = displacement_values();
  for (std::size_t i = 0; i < m.vertices.size(); ++i) m.vertices[i] += d[i];
  m.colors = color_values();
  return m;
}

Checkpoint attack_checkpoint(const AttackParams& params, const AttackConfig& cfg, std::size_t steps) {
  Checkpoint ckpt;
  ckpt.meta["kind"] = "attack";
  ckpt.meta["config"] = to_json(cfg);
  const AdamConfig ac;
  ckpt.meta["adam"] = {{"lr", cfg.lr()}, {"beta1", ac.beta1}, {"beta2", ac.beta2}, {"eps", ac.eps}, {"step", steps}};
  ckpt.meta["subdivisions"] = cfg.subdivisions;
  ckpt.meta["radius"] = cfg.radius;
  ckpt.meta["phase"] = phase_name(cfg.phase);
  ckpt.blocks.push_back(params.displacement);
  ckpt.blocks.push_back(params.colors);
  return ckpt;
}

AttackParams attack_params_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.meta.value("kind", "") != "attack") throw std::runtime_error("checkpoint does not hold an attack mesh");
  AttackParams p = AttackParams::initial(ckpt.meta.at("subdivisions").get<int>(), ckpt.meta.at("radius").get<double>());
  const auto& d = ckpt.block("displacement");
  const auto& c = ckpt.block("colors");
  if (d.size() != p.displacement.size() || c.size() != p.colors.size())
    throw std::runtime_error("attack checkpoint blocks do not match the icosphere size");
  std::copy(d.values().begin(), d.values().end(), p.displacement.values().begin());
  std::copy(c.values().begin(), c.values().end(), p.colors.values().begin());
  return p;
}

Composite compose_scene(const Scene& scene, const AttackParams& params, const AttackConfig& cfg,
                        const CompositeOptions& opts) {
  Composite c;
  TriMesh colored = params.base;
  colored.colors = params.color_values();
  c.placements = place_meshes(scene, colored, params.displacement_values(), cfg.clearance);

  std::vector<std::size_t> face_offset;
  for (const auto& p : c.placements) {
    c.vertex_offset.push_back(c.combined.vertices.size());
    face_offset.push_back(c.combined.faces.size());
    const auto off = static_cast<std::uint32_t>(c.combined.vertices.size());
    c.combined.vertices.insert(c.combined.vertices.end(), p.mesh.vertices.begin(), p.mesh.vertices.end());
    c.combined.colors.insert(c.combined.colors.end(), p.mesh.colors.begin(), p.mesh.colors.end());
    for (const auto& f : p.mesh.faces) c.combined.faces.push_back({f[0] + off, f[1] + off, f[2] + off});
  }

  c.cloud = scene.cloud;
  if (opts.lidar) {
    if (cfg.occlusion_cull)
      for (const auto& p : c.placements) c.cloud = cull_occluded(c.cloud, p.mesh, cfg.lidar.origin);
    // Nearest hit per ray across placements, emitted in ray order.
    std::map<std::size_t, std::pair<HitRecord, Vec3>> by_ray;
    for (std::size_t k = 0; k < c.placements.size(); ++k) {
      const LidarRender r = render_lidar(c.placements[k].mesh, cfg.lidar);
      for (std::size_t h = 0; h < r.hits.size(); ++h) {
        HitRecord hit = r.hits[h];
        hit.face_id += face_offset[k];
        auto it = by_ray.find(hit.ray_id);
        if (it == by_ray.end() || hit.t < it->second.first.t) by_ray[hit.ray_id] = {hit, r.cloud.points[h]};
      }
    }
    c.scene_points = c.cloud.size();
    for (const auto& [ray, entry] : by_ray) {
      c.hits.push_back(entry.first);
      c.cloud.push_back(entry.second, kRenderedReflectance);
    }
  } else {
    c.scene_points = c.cloud.size();
  }

  if (opts.image) {
    TriMesh cam_mesh = c.combined;
    for (auto& v : cam_mesh.vertices) v = scene.calib.velo_to_cam(v);
    RasterResult r = rasterize(cam_mesh, scene.camera(), scene.image);
    c.image = std::move(r.image);
    c.coverage = std::move(r.coverage);
  } else {
    c.image = scene.image;
  }
  return c;
}

Scene attacked_scene(const Scene& scene, const Composite& c) {
  Scene out = scene;
  out.cloud = c.cloud;
  out.image = c.image;
  return out;
}

std::optional<CarProb> car_prob(std::span<const Logits> logits) {
  std::optional<CarProb> best;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!is_car(logits[i])) continue;
    const double p = car_probability(logits[i]);
    if (!best || p > best->p) best = CarProb{p, i};
  }
  return best;
}

double car_nll(const Logits& l) {
  const double z = l[1] - l[0];
  return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
}

double l_mesh(std::span<const MeshTerm> terms) {
  double sum = 0.0;
  for (const auto& t : terms) {
    if (!t.p || t.iou == 0.0) continue;
    sum += -std::log(1.0 - std::min(*t.p, kMaxCarProbability)) * t.iou;
  }
  return sum;
}

std::vector<ObjectTerm> scene_mesh_terms(const Scene& scene, const Victim& victim, const AttackParams& params,
                                         const AttackConfig& cfg, Displacement* grad) {
  const Composite comp = compose_scene(scene, params, cfg, {true, false});
  const CameraModel cam = scene.camera();
  std::vector<ObjectTerm> terms;
  std::vector<Vec3> point_grads(comp.hits.size());
  bool any_grad = false;
  const auto inputs = frustum_inputs(scene, scene.image, victim, cfg.frustum_source);
  for (std::size_t j = 0; j < inputs.size(); ++j) {
    const auto& in = inputs[j];
    const FrustumPass pass =
        run_frustum(victim, comp.cloud, in.box, scene.calib, cam, frustum_seed(cfg.seed, scene.id, j));
    ObjectTerm term;
    term.scene_id = scene.id;
    term.object = in.object;
    const auto cp = car_prob(pass.seg.logits);
    if (cp) term.p = cp->p;
    term.iou = pass.estimate ? iou_bev(*pass.estimate, scene.objects[in.object].box) : 0.0;
    if (cp) term.nll = car_nll(pass.seg.logits[cp->index]);
    term.loss = term.iou * term.nll;
    terms.push_back(term);
    if (!grad || !cp || term.iou == 0.0) continue;

    // d/dz of -iou * log(1 - sigmoid(z)) with z = car logit - not-car logit.
    std::vector<Logits> dl(pass.seg.logits.size(), Logits{0.0, 0.0});
    dl[cp->index] = {-term.iou * cp->p, term.iou * cp->p};
    const auto dx = segment_backward(victim.seg, pass.seg, dl, nullptr);
    Vec3 mean;
    for (const auto& g : dx) mean += g;
    mean = mean / static_cast<double>(dx.size());
    for (std::size_t i = 0; i < dx.size(); ++i) {
      const std::size_t idx = pass.frustum.indices[i];
      if (idx < comp.scene_points) continue;
      point_grads[idx - comp.scene_points] += dx[i] - mean;
      any_grad = true;
    }
  }
  if (grad && any_grad) {
    const auto vgrad = lidar_backward(comp.hits, point_grads, comp.combined);
    const std::size_t nv = params.base.vertices.size();
    std::vector<Vec3> slice(nv);
    for (std::size_t k = 0; k < comp.placements.size(); ++k) {
      std::copy_n(vgrad.begin() + static_cast<std::ptrdiff_t>(comp.vertex_offset[k]), nv, slice.begin());
      deformation_backward(comp.placements[k].pose, slice, *grad);
    }
  }
  return terms;
}

PcLoss pc_loss(std::span<const Scene* const> batch, const Victim& victim, const AttackParams& params,
               const AttackConfig& cfg, bool with_grad) {
  const std::size_t nv = params.base.vertices.size();
  std::vector<std::vector<ObjectTerm>> per_scene(batch.size());
  std::vector<Displacement> grads(with_grad ? batch.size() : 0, Displacement(nv));
  parallel_for(batch.size(), cfg.threads, [&](std::size_t i) {
    per_scene[i] = scene_mesh_terms(*batch[i], victim, params, cfg, with_grad ? &grads[i] : nullptr);
  });
  PcLoss out;
  for (const auto& terms : per_scene)
    for (const auto& t : terms) {
      out.l_mesh += t.loss;
      out.terms.push_back(t);
    }
  const TriMesh object = params.object_mesh();
  out.l_lap = laplacian_loss(object);
  out.total = out.l_mesh + cfg.lambda * out.l_lap;
  if (with_grad) {
    out.grad.assign(nv, Vec3{});
    for (const auto& g : grads)
      for (std::size_t v = 0; v < nv; ++v) out.grad[v] += g[v];
    const auto lap = laplacian_loss_grad(object);
    for (std::size_t v = 0; v < nv; ++v) out.grad[v] += cfg.lambda * lap[v];
  }
  return out;
}

ImageLoss image_loss(const Scene& scene, const Victim& victim, const AttackParams& params, const AttackConfig& cfg,
                     bool with_grad) {
  const Composite comp = compose_scene(scene, params, cfg, {false, true});
  const ScorerForward fwd = victim.scorer.forward(comp.image);
  std::vector<double> sgrad(fwd.scores.size(), 0.0);
  ImageLoss out;
  for (std::size_t a = 0; a < fwd.scores.size(); ++a) {
    if (fwd.scores[a] < cfg.image_score_floor) continue;
    bool overlaps = false;
    for (const auto& gt : scene.objects) overlaps = overlaps || iou_2d(fwd.boxes[a], gt.box2d) >= cfg.image_match_iou;
    if (!overlaps) continue;
    out.loss += fwd.scores[a];
    sgrad[a] = 1.0;
    ++out.detections;
  }
  if (with_grad) {
    const std::size_t nv = params.base.vertices.size();
    out.color_grad.assign(nv, Vec3{});
    if (out.detections > 0 && !comp.coverage.samples.empty()) {
      const Image img_grad = victim.scorer.backward(fwd, sgrad);
      const auto cg = color_backward(comp.coverage, img_grad);
      for (std::size_t v = 0; v < cg.size(); ++v) out.color_grad[v % nv] += cg[v];
    }
  }
  return out;
}

std::vector<LossReport> run_attack(const AttackConfig& cfg, const std::vector<Scene>& scenes, const Victim& victim,
                                   AttackParams& params) {
  cfg.validate();
  if (!victim.trained()) throw InvalidState("run_attack: the victim has not been trained");
  std::vector<LossReport> trail;
  if (cfg.epochs() == 0 || scenes.empty()) return trail;

  params.colors.set_bounds(0.0, 1.0);
  AdamConfig ac;
  ac.lr = cfg.lr();
  AdamState state(ac, cfg.phase == AttackPhase::Shape ? params.displacement.size() : params.colors.size());
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(scenes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const std::size_t batch = static_cast<std::size_t>(cfg.batch_size);

  for (int epoch = 0; epoch < cfg.epochs(); ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0, bi = 0; start < order.size(); start += batch, ++bi) {
      std::vector<const Scene*> members;
      for (std::size_t k = start; k < std::min(order.size(), start + batch); ++k) members.push_back(&scenes[order[k]]);
      LossReport rep;
      rep.epoch = epoch;
      rep.batch = static_cast<int>(bi);

      if (cfg.phase == AttackPhase::Shape) {
        const std::vector<double> colors_before(params.colors.values().begin(), params.colors.values().end());
        PcLoss pl = pc_loss(members, victim, params, cfg, true);
        if (std::abs(pl.total - (pl.l_mesh + cfg.lambda * pl.l_lap)) > 1e-12)
          throw std::logic_error("loss decomposition drifted");
        params.displacement.zero_grad();
        params.displacement.accumulate_grad_vec3(pl.grad);
        adam_step(params.displacement, state);
        params.displacement.assign_vec3(clamp_extents(params.displacement_values(), params.base, cfg.extents));
        const Extents e = bounding_extents(params.object_mesh().vertices);
        constexpr double kSlack = 1e-12;
        if (e.x > cfg.extents.x + kSlack || e.y > cfg.extents.y + kSlack || e.z > cfg.extents.z + kSlack)
          throw std::logic_error("mesh extents exceed the configured limits after a shape step");
        if (!bit_equal(params.colors.values(), colors_before))
          throw std::logic_error("vertex colors changed during the shape phase");
        rep.l_mesh = pl.l_mesh;
        rep.l_lap = pl.l_lap;
        rep.total = pl.total;
        rep.terms = std::move(pl.terms);
      } else {
        const std::vector<double> disp_before(params.displacement.values().begin(),
                                              params.displacement.values().end());
        std::vector<ImageLoss> losses(members.size());
        parallel_for(members.size(), cfg.threads,
                     [&](std::size_t i) { losses[i] = image_loss(*members[i], victim, params, cfg, true); });
        std::vector<Vec3> grad(params.base.vertices.size());
        for (const auto& l : losses) {
          rep.image_loss += l.loss;
          for (std::size_t v = 0; v < grad.size(); ++v) grad[v] += l.color_grad[v];
        }
        params.colors.zero_grad();
        params.colors.accumulate_grad_vec3(grad);
        adam_step(params.colors, state);
        for (double c : params.colors.values())
          if (!(c >= 0.0 && c <= 1.0)) throw std::logic_error("vertex color left [0, 1] after a texture step");
        if (!bit_equal(params.displacement.values(), disp_before))
          throw std::logic_error("displacements changed during the texture phase");
      }
      trail.push_back(std::move(rep));
    }
  }
  return trail;
}

std::vector<double> epoch_means(const std::vector<LossReport>& trail, AttackPhase phase) {
  std::vector<double> sums, counts;
  for (const auto& r : trail) {
    if (static_cast<std::size_t>(r.epoch) >= sums.size()) {
      sums.resize(r.epoch + 1, 0.0);
      counts.resize(r.epoch + 1, 0.0);
    }
    sums[r.epoch] += phase == AttackPhase::Shape ? r.total : r.image_loss;
    counts[r.epoch] += 1.0;
  }
  for (std::size_t i = 0; i < sums.size(); ++i)
    if (counts[i] > 0) sums[i] /= counts[i];
  return sums;
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossReport>& trail) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "epoch,batch,l_mesh,l_lap,total,image_loss\n";
  char buf[256];
  for (const auto& r : trail) {
    std::snprintf(buf, sizeof(buf), "%d,%d,%.17g,%.17g,%.17g,%.17g\n", r.epoch, r.batch, r.l_mesh, r.l_lap, r.total,
                  r.image_loss);
    out << buf;
  }
}

}  // namespace advmesh
