#include "advmesh/pipeline.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "advmesh/json_util.hpp"
#include "advmesh/mesh_io.hpp"
#include "advmesh/parallel.hpp"

namespace advmesh {
namespace fs = std::filesystem;

namespace {

const char* view_name(IouView v) { return v == IouView::Bev ? "bev" : "3d"; }

IouView parse_view(const std::string& s) {
  if (s == "bev") return IouView::Bev;
  if (s == "3d") return IouView::ThreeD;
  throw std::invalid_argument("eval: unknown view '" + s + "' (expected bev or 3d)");
}

fs::path resolve(const fs::path& p, const fs::path& base) {
  if (p.empty()) return p;
  return fs::absolute(p.is_absolute() || base.empty() ? p : base / p).lexically_normal();
}

void require_file(const fs::path& p, const char* producer) {
  if (!fs::exists(p)) throw std::runtime_error("missing " + p.string() + "; run `" + producer + "` first");
}

void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

}  // namespace

fs::path RunConfig::dataset_dir() const { return dataset.path.empty() ? output_dir / "dataset" : dataset.path; }

void RunConfig::validate() const {
  if (output_dir.empty()) throw std::invalid_argument("output_dir must not be empty");
  if (threads < 1) throw std::invalid_argument("threads must be >= 1");
  if (dataset.source == DatasetSource::Kitti && dataset.path.empty())
    throw std::invalid_argument("dataset.path is required for KITTI data");
  dataset.synthetic.validate();
  attack.validate();
  eval.metric.validate();
  if (!(eval.recall_iou > 0.0 && eval.recall_iou <= 1.0)) throw std::invalid_argument("eval.recall_iou must be in (0, 1]");
}

nlohmann::json to_json(const SynthConfig& c) {
  return {{"num_scenes", c.num_scenes},
          {"cars_min", c.cars_min},
          {"cars_max", c.cars_max},
          {"clutter_count", c.clutter_count},
          {"car_distance_min", c.car_distance_min},
          {"car_distance_max", c.car_distance_max},
          {"ground_length", c.ground_length},
          {"ground_half_width", c.ground_half_width},
          {"ground_density", c.ground_density},
          {"ground_jitter", c.ground_jitter},
          {"car_density", c.car_density},
          {"car_jitter", c.car_jitter},
          {"sensor_height", c.sensor_height},
          {"image_width", c.image_width},
          {"image_height", c.image_height},
          {"focal", c.focal},
          {"principal_x", c.principal_x},
          {"principal_y", c.principal_y},
          {"image_noise", c.image_noise},
          {"seed", c.seed}};
}

SynthConfig synth_config_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j, {"num_scenes", "cars_min", "cars_max", "clutter_count", "car_distance_min",
                          "car_distance_max", "ground_length", "ground_half_width", "ground_density",
                          "ground_jitter", "car_density", "car_jitter", "sensor_height", "image_width",
                          "image_height", "focal", "principal_x", "principal_y", "image_noise", "seed"},
                      "dataset.synthetic");
  SynthConfig c;
  read_key(j, "num_scenes", c.num_scenes);
  read_key(j, "cars_min", c.cars_min);
  read_key(j, "cars_max", c.cars_max);
  read_key(j, "clutter_count", c.clutter_count);
  read_key(j, "car_distance_min", c.car_distance_min);
  read_key(j, "car_distance_max", c.car_distance_max);
  read_key(j, "ground_length", c.ground_length);
  read_key(j, "ground_half_width", c.ground_half_width);
  read_key(j, "ground_density", c.ground_density);
  read_key(j, "ground_jitter", c.ground_jitter);
  read_key(j, "car_density", c.car_density);
  read_key(j, "car_jitter", c.car_jitter);
  read_key(j, "sensor_height", c.sensor_height);
  read_key(j, "image_width", c.image_width);
  read_key(j, "image_height", c.image_height);
  read_key(j, "focal", c.focal);
  read_key(j, "principal_x", c.principal_x);
  read_key(j, "principal_y", c.principal_y);
  read_key(j, "image_noise", c.image_noise);
  read_key(j, "seed", c.seed);
  c.validate();
  return c;
}

nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  j["output_dir"] = c.output_dir.string();
  if (c.seed) j["seed"] = *c.seed;
  j["threads"] = c.threads;
  j["enforce_victim_gates"] = c.enforce_victim_gates;
  j["dataset"] = {{"source", c.dataset.source == DatasetSource::Synthetic ? "synthetic" : "kitti"},
                  {"path", c.dataset.path.string()},
                  {"synthetic", to_json(c.dataset.synthetic)}};
  j["victim"] = to_json(c.victim);
  j["victim_train"] = to_json(c.victim_train);
  j["attack"] = to_json(c.attack);
  j["eval"] = {{"iou_threshold", c.eval.metric.iou_threshold},
               {"view", view_name(c.eval.metric.view)},
               {"recall_points", c.eval.metric.recall_points},
               {"frustum_source", frustum_source_name(c.eval.frustum_source)},
               {"recall_iou", c.eval.recall_iou},
               {"seed", c.eval.seed}};
  return j;
}

RunConfig run_config_from_json(const nlohmann::json& j, const fs::path& base_dir) {
  reject_unknown_keys(j, {"output_dir", "seed", "threads", "enforce_victim_gates", "dataset", "victim", "victim_train", "attack", "eval"},
                      "config");
  RunConfig c;
  if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
  c.output_dir = resolve(c.output_dir, base_dir);
  read_key(j, "threads", c.threads);
  read_key(j, "enforce_victim_gates", c.enforce_victim_gates);
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    reject_unknown_keys(d, {"source", "path", "synthetic"}, "dataset");
    const std::string source = d.value("source", "synthetic");
    if (source == "synthetic") c.dataset.source = DatasetSource::Synthetic;
    else if (source == "kitti") c.dataset.source = DatasetSource::Kitti;
    else throw std::invalid_argument("dataset: unknown source '" + source + "' (expected synthetic or kitti)");
    if (d.contains("path")) c.dataset.path = resolve(d.at("path").get<std::string>(), base_dir);
    if (d.contains("synthetic")) c.dataset.synthetic = synth_config_from_json(d.at("synthetic"));
  }
  if (j.contains("victim")) c.victim = victim_config_from_json(j.at("victim"));
  if (j.contains("victim_train")) c.victim_train = victim_train_config_from_json(j.at("victim_train"));
  if (j.contains("attack")) c.attack = attack_config_from_json(j.at("attack"));
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    reject_unknown_keys(e, {"iou_threshold", "view", "recall_points", "frustum_source", "recall_iou", "seed"},
                        "eval");
    read_key(e, "iou_threshold", c.eval.metric.iou_threshold);
    if (e.contains("view")) c.eval.metric.view = parse_view(e.at("view").get<std::string>());
    read_key(e, "recall_points", c.eval.metric.recall_points);
    if (e.contains("frustum_source"))
      c.eval.frustum_source = parse_frustum_source(e.at("frustum_source").get<std::string>());
    read_key(e, "recall_iou", c.eval.recall_iou);
    read_key(e, "seed", c.eval.seed);
  }
  if (j.contains("seed")) {
    const auto s = j.at("seed").get<std::uint64_t>();
    c.seed = s;
    c.dataset.synthetic.seed = s;
    c.victim_train.seed = s + 1;
    c.attack.seed = s + 2;
    c.attack.lidar.seed = s + 3;
    c.eval.seed = s + 4;
  }
  c.attack.threads = c.threads;
  c.validate();
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
  return run_config_from_json(j, fs::absolute(path).parent_path());
}

void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw std::invalid_argument("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::parse_error&) {
    value = raw;
  }
  nlohmann::json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw std::invalid_argument("override '" + assignment + "' has an empty key segment");
    if (!node->is_object()) *node = nlohmann::json::object();
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

void echo_config(const RunConfig& cfg) { write_text(cfg.output_dir / "config.json", to_json(cfg).dump(2) + "\n"); }

std::vector<Scene> load_scenes(const RunConfig& cfg) {
  const fs::path dir = cfg.dataset_dir();
  if (!fs::exists(dir / "label_2")) {
    if (cfg.dataset.source == DatasetSource::Synthetic)
      throw std::runtime_error("no dataset at " + dir.string() + "; run `gen-scenes` first");
    throw std::runtime_error("no KITTI dataset at " + dir.string() + " (expected velodyne/, image_2/, calib/, label_2/)");
  }
  return read_dataset(dir);
}

Split split_scenes(std::vector<Scene> scenes) {
  Split s;
  for (auto& scene : scenes) (is_training_scene(scene.id) ? s.train : s.val).push_back(std::move(scene));
  return s;
}

std::size_t gen_scenes(const RunConfig& cfg) {
  if (cfg.dataset.source != DatasetSource::Synthetic)
    throw std::runtime_error("gen-scenes only produces synthetic datasets; dataset.source is kitti");
  const fs::path dir = cfg.dataset_dir();
  fs::remove_all(dir);
  const auto scenes = gen_synthetic(cfg.dataset.synthetic);
  for (const auto& s : scenes) write_scene(dir, s);
  return scenes.size();
}

bool victim_gates_met(const VictimReport& r) {
  return r.seg_accuracy >= kSegAccuracyGate && r.clean_bev_ap >= kCleanApGate;
}

nlohmann::json to_json(const VictimReport& r) {
  return {{"seg_accuracy", r.seg_accuracy},
          {"clean_bev_ap", r.clean_bev_ap},
          {"scorer_recall", r.scorer_recall},
          {"final_scorer_loss", r.final_scorer_loss},
          {"final_seg_loss", r.final_seg_loss}};
}

VictimReport victim_report_from_json(const nlohmann::json& j) {
  VictimReport r;
  read_key(j, "seg_accuracy", r.seg_accuracy);
  read_key(j, "clean_bev_ap", r.clean_bev_ap);
  read_key(j, "scorer_recall", r.scorer_recall);
  read_key(j, "final_scorer_loss", r.final_scorer_loss);
  read_key(j, "final_seg_loss", r.final_seg_loss);
  return r;
}

VictimRun train_victim_cmd(const RunConfig& cfg) {
  const Split split = split_scenes(load_scenes(cfg));
  if (split.train.empty() || split.val.empty())
    throw std::runtime_error("the dataset needs scenes in both the training and validation splits");
  VictimRun run;
  run.victim = train_victim(split.train, split.val, cfg.victim, cfg.victim_train, &run.report);
  Checkpoint ckpt = victim_checkpoint(run.victim);
  ckpt.meta["report"] = to_json(run.report);
  ckpt.meta["training"] = to_json(cfg.victim_train);
  fs::create_directories(cfg.output_dir);
  save_checkpoint(cfg.output_dir / "victim.ckpt", ckpt);
  nlohmann::json report = to_json(run.report);
  report["gates"] = {{"seg_accuracy", kSegAccuracyGate}, {"clean_bev_ap", kCleanApGate}};
  report["gates_met"] = victim_gates_met(run.report);
  write_text(cfg.output_dir / "victim_report.json", report.dump(2) + "\n");
  return run;
}

VictimRun load_victim(const RunConfig& cfg, bool require_gates) {
  const fs::path p = cfg.output_dir / "victim.ckpt";
  require_file(p, "train-victim");
  const Checkpoint ckpt = load_checkpoint(p);
  VictimRun run;
  run.victim = victim_from_checkpoint(ckpt);
  run.report = victim_report_from_json(ckpt.meta.value("report", nlohmann::json::object()));
  if (require_gates && !victim_gates_met(run.report)) {
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "victim gates unmet (segmentation accuracy %.4f, need %.2f; clean BEV AP %.4f, need %.2f); "
                  "retrain with `train-victim`",
                  run.report.seg_accuracy, kSegAccuracyGate, run.report.clean_bev_ap, kCleanApGate);
    throw std::runtime_error(buf);
  }
  return run;
}

fs::path mesh_checkpoint_path(const RunConfig& cfg, AttackPhase phase) {
  return cfg.output_dir / (std::string("mesh_") + phase_name(phase) + ".ckpt");
}

fs::path loss_csv_path(const RunConfig& cfg, AttackPhase phase) {
  return cfg.output_dir / (std::string("loss_") + phase_name(phase) + ".csv");
}

AttackParams load_attack_params(const RunConfig& cfg, AttackPhase phase) {
  const fs::path p = mesh_checkpoint_path(cfg, phase);
  require_file(p, phase == AttackPhase::Shape ? "attack --phase shape" : "attack --phase texture");
  return attack_params_from_checkpoint(load_checkpoint(p));
}

AttackRun attack_cmd(const RunConfig& cfg, AttackPhase phase) {
  const VictimRun vr = load_victim(cfg, cfg.enforce_victim_gates);
  AttackConfig acfg = cfg.attack;
  acfg.phase = phase;
  AttackRun run;
  run.params = phase == AttackPhase::Shape ? AttackParams::initial(acfg.subdivisions, acfg.radius)
                                           : load_attack_params(cfg, AttackPhase::Shape);
  const Split split = split_scenes(load_scenes(cfg));
  run.trail = run_attack(acfg, split.train, vr.victim, run.params);
  save_checkpoint(mesh_checkpoint_path(cfg, phase), attack_checkpoint(run.params, acfg, run.trail.size()));
  write_loss_csv(loss_csv_path(cfg, phase), run.trail);
  write_ply(cfg.output_dir / (std::string("mesh_") + phase_name(phase) + ".ply"), run.params.object_mesh());
  return run;
}

const char* attack_row_label(AttackRow row) {
  switch (row) {
    case AttackRow::None: return "No Attack";
    case AttackRow::PointCloud: return "PC: Adv Shape";
    case AttackRow::Image: return "Img: Adv Texture";
    case AttackRow::Both: return "PC + Img: Adv Object";
  }
  return "";
}

const char* attack_row_key(AttackRow row) {
  switch (row) {
    case AttackRow::None: return "none";
    case AttackRow::PointCloud: return "pc";
    case AttackRow::Image: return "img";
    case AttackRow::Both: return "pc+img";
  }
  return "";
}

std::vector<AttackRow> parse_attack_rows(const std::string& s) {
  if (s == "all") return {AttackRow::None, AttackRow::PointCloud, AttackRow::Image, AttackRow::Both};
  for (AttackRow r : {AttackRow::None, AttackRow::PointCloud, AttackRow::Image, AttackRow::Both})
    if (s == attack_row_key(r)) return {r};
  throw std::invalid_argument("unknown attack '" + s + "' (expected none, pc, img, pc+img or all)");
}

std::vector<Scene> attacked_scenes(const std::vector<Scene>& scenes, const AttackParams& params,
                                   const AttackConfig& cfg, AttackRow row) {
  if (row == AttackRow::None) return scenes;
  const CompositeOptions opts{row != AttackRow::Image, row != AttackRow::PointCloud};
  std::vector<Scene> out(scenes.size());
  parallel_for(scenes.size(), cfg.threads,
               [&](std::size_t i) { out[i] = attacked_scene(scenes[i], compose_scene(scenes[i], params, cfg, opts)); });
  return out;
}

RowResult evaluate_row(const Victim& victim, const std::vector<Scene>& val, const AttackParams* params,
                       const RunConfig& cfg, AttackRow row) {
  if (row != AttackRow::None && !params) throw std::invalid_argument("evaluate_row: attack rows need mesh parameters");
  const std::vector<Scene> scenes = row == AttackRow::None ? val : attacked_scenes(val, *params, cfg.attack, row);
  const auto frames = detect_frames(victim, scenes, cfg.eval.frustum_source, cfg.eval.seed);
  RowResult r;
  r.row = row;
  for (Difficulty d : {Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard}) {
    EvalConfig ec = cfg.eval.metric;
    ec.difficulty = d;
    r.ap[static_cast<std::size_t>(d)] = average_precision(frames, ec);
  }
  r.proposal_recall = proposal_recall(victim, scenes, cfg.eval.recall_iou, Difficulty::Hard);
  return r;
}

EvalResult eval_cmd(const RunConfig& cfg, const std::vector<AttackRow>& rows) {
  const VictimRun vr = load_victim(cfg, false);
  std::optional<AttackParams> params;
  for (AttackRow r : rows)
    if (r != AttackRow::None && !params) params = load_attack_params(cfg, AttackPhase::Texture);
  const Split split = split_scenes(load_scenes(cfg));
  EvalResult out;
  std::vector<TableRow> table;
  nlohmann::json report = nlohmann::json::array();
  for (AttackRow r : rows) {
    out.rows.push_back(evaluate_row(vr.victim, split.val, params ? &*params : nullptr, cfg, r));
    const RowResult& rr = out.rows.back();
    table.push_back({attack_row_label(r), {100.0 * rr.ap[0].ap, 100.0 * rr.ap[1].ap, 100.0 * rr.ap[2].ap}});
    nlohmann::json row = {{"attack", attack_row_key(r)}, {"label", attack_row_label(r)},
                          {"proposal_recall", rr.proposal_recall}};
    for (const auto& ap : rr.ap)
      row[difficulty_name(ap.config.difficulty)] = {{"ap", ap.ap},
                                                    {"detections", ap.num_detections},
                                                    {"ground_truth", ap.num_ground_truth},
                                                    {"true_positives", ap.true_positives},
                                                    {"false_positives", ap.false_positives}};
    report.push_back(row);
  }
  out.text = format_table_text(table);
  out.csv = format_table_csv(table);
  const std::optional<std::size_t> clean = [&]() -> std::optional<std::size_t> {
    for (std::size_t i = 0; i < out.rows.size(); ++i)
      if (out.rows[i].row == AttackRow::None) return i;
    return std::nullopt;
  }();
  if (clean) {
    std::ostringstream deltas;
    deltas << "\nRelative AP drop vs No Attack\n";
    for (const auto& rr : out.rows) {
      if (rr.row == AttackRow::None) continue;
      char buf[160];
      std::snprintf(buf, sizeof(buf), "%-22s", attack_row_label(rr.row));
      deltas << buf;
      for (std::size_t d = 0; d < 3; ++d) {
        const DeltaRow dr = attack_delta(out.rows[*clean].ap[d], rr.ap[d]);
        std::snprintf(buf, sizeof(buf), " %7.1f%%", 100.0 * dr.relative_drop);
        deltas << buf;
      }
      deltas << "\n";
    }
    out.text += deltas.str();
  }
  const std::string tag = rows.size() == 4 ? "all" : attack_row_key(rows.front());
  std::string file_tag = tag;
  for (auto& ch : file_tag)
    if (ch == '+') ch = '_';
  write_text(cfg.output_dir / ("eval_" + file_tag + ".txt"), out.text);
  write_text(cfg.output_dir / ("eval_" + file_tag + ".csv"), out.csv);
  write_text(cfg.output_dir / ("eval_" + file_tag + ".json"), report.dump(2) + "\n");
  return out;
}

fs::path detect_cmd(const RunConfig& cfg, AttackRow row) {
  const VictimRun vr = load_victim(cfg, false);
  std::optional<AttackParams> params;
  if (row != AttackRow::None) params = load_attack_params(cfg, AttackPhase::Texture);
  const Split split = split_scenes(load_scenes(cfg));
  const std::vector<Scene> scenes =
      row == AttackRow::None ? split.val : attacked_scenes(split.val, *params, cfg.attack, row);
  std::string tag = attack_row_key(row);
  for (auto& ch : tag)
    if (ch == '+') ch = '_';
  const fs::path dir = cfg.output_dir / ("detections_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto frames = detect_frames(vr.victim, scenes, cfg.eval.frustum_source, cfg.eval.seed);
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    std::string text;
    for (const auto& d : frames[i].detections) {
      GroundTruth g;
      g.box = d.box;
      const auto b2 = project_box(d.box, scenes[i].calib, scenes[i].camera());
      if (b2) g.box2d = *b2;
      text += format_label_line(g, scenes[i].calib, d.score) + "\n";
    }
    write_text(dir / (scenes[i].id + ".txt"), text);
  }
  return dir;
}

RenderResult render_cmd(const RunConfig& cfg, const std::string& scene_id) {
  const fs::path dir = cfg.dataset_dir();
  if (!fs::exists(dir / "label_2" / (scene_id + ".txt")))
    throw std::runtime_error("scene '" + scene_id + "' not found under " + dir.string() + "; run `gen-scenes` first");
  const Scene scene = read_scene(dir, scene_id);
  const AttackParams params = load_attack_params(cfg, AttackPhase::Texture);
  const Composite comp = compose_scene(scene, params, cfg.attack, {true, true});
  RenderResult r;
  const fs::path out = cfg.output_dir / "render";
  fs::create_directories(out);
  r.clean_png = out / (scene_id + "_clean.png");
  r.attacked_png = out / (scene_id + "_attacked.png");
  r.clean_bin = out / (scene_id + "_clean.bin");
  r.attacked_bin = out / (scene_id + "_attacked.bin");
  write_png(r.clean_png, scene.image);
  write_png(r.attacked_png, comp.image);
  write_velodyne(r.clean_bin, scene.cloud);
  write_velodyne(r.attacked_bin, comp.cloud);
  return r;
}

void export_mesh_cmd(const fs::path& checkpoint, const fs::path& out) {
  require_file(checkpoint, "attack");
  const AttackParams params = attack_params_from_checkpoint(load_checkpoint(checkpoint));
  if (!out.parent_path().empty()) fs::create_directories(out.parent_path());
  if (out.extension() == ".obj") write_obj(out, params.object_mesh());
  else write_ply(out, params.object_mesh());
}

}  // namespace advmesh
