#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "advmesh/mesh_io.hpp"
#include "advmesh/pipeline.hpp"
#include "oracles.hpp"

using namespace advmesh;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("advmesh_test_pipeline_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return {};
}

// A run small enough to train and attack in a few seconds.
nlohmann::json tiny_run(const fs::path& out) {
  auto j = nlohmann::json::parse(R"({
    "threads": 2,
    "enforce_victim_gates": false,
    "dataset": {"synthetic": {"num_scenes": 12, "seed": 5, "ground_density": 0.3}},
    "victim": {"seg_hidden": 16, "frustum_points": 96},
    "victim_train": {"scorer_epochs": 2, "seg_epochs": 2, "seed": 3},
    "attack": {"shape_epochs": 1, "texture_epochs": 1, "batch_size": 4, "subdivisions": 1,
               "lidar": {"azimuth_start_deg": -40.0, "azimuth_end_deg": 40.0}},
    "eval": {"iou_threshold": 0.5}
  })");
  j["output_dir"] = out.string();
  return j;
}

}  // namespace

TEST_CASE("run config parsing") {
  const RunConfig d = run_config_from_json(nlohmann::json::object());
  CHECK(d.output_dir == fs::absolute("run"));
  CHECK(d.enforce_victim_gates);

  SUBCASE("unknown keys are rejected at every level") {
    for (const char* doc : {R"({"outptu_dir": "x"})", R"({"dataset": {"sauce": "kitti"}})",
                            R"({"dataset": {"synthetic": {"num_scene": 3}}})", R"({"victim": {"hiden": 3}})",
                            R"({"victim": {"scorer": {"strid": 3}}})", R"({"victim_train": {"epochs": 3}})",
                            R"({"attack": {"lamda": 3}})", R"({"attack": {"lidar": {"beam": 3}}})",
                            R"({"eval": {"iou": 0.5}})"}) {
      CAPTURE(doc);
      CHECK_THROWS_AS(run_config_from_json(nlohmann::json::parse(doc)), std::invalid_argument);
    }
  }
  SUBCASE("invalid values") {
    CHECK_THROWS_AS(run_config_from_json(nlohmann::json::parse(R"({"threads": 0})")), std::invalid_argument);
    CHECK_THROWS_AS(run_config_from_json(nlohmann::json::parse(R"({"dataset": {"source": "kitti"}})")),
                    std::invalid_argument);
    CHECK_THROWS_AS(run_config_from_json(nlohmann::json::parse(R"({"eval": {"view": "side"}})")),
                    std::invalid_argument);
    CHECK_THROWS_AS(run_config_from_json(nlohmann::json::parse(R"({"attack": {"lambda": -1}})")),
                    std::invalid_argument);
  }
  SUBCASE("paths resolve against the config directory") {
    const auto c = run_config_from_json(
        nlohmann::json::parse(R"({"output_dir": "../out", "dataset": {"source": "kitti", "path": "data/kitti"}})"),
        "/tmp/cfgs/sub");
    CHECK(c.output_dir == fs::path("/tmp/cfgs/out"));
    CHECK(c.dataset_dir() == fs::path("/tmp/cfgs/sub/data/kitti"));
    const auto abs = run_config_from_json(nlohmann::json::parse(R"({"output_dir": "/var/x"})"), "/tmp");
    CHECK(abs.output_dir == fs::path("/var/x"));
    CHECK(abs.dataset_dir() == fs::path("/var/x/dataset"));
  }
  SUBCASE("a top-level seed derives every module seed") {
    const auto c = run_config_from_json(nlohmann::json::parse(R"({"seed": 100})"));
    CHECK(c.dataset.synthetic.seed == 100);
    CHECK(c.victim_train.seed == 101);
    CHECK(c.attack.seed == 102);
    CHECK(c.attack.lidar.seed == 103);
    CHECK(c.eval.seed == 104);
  }
  SUBCASE("threads reach the attack") {
    const auto c = run_config_from_json(nlohmann::json::parse(R"({"threads": 3})"));
    CHECK(c.attack.threads == 3);
  }
  SUBCASE("serialized config reads back identically") {
    const auto c = run_config_from_json(tiny_run("/tmp/advmesh_tiny"));
    const auto again = run_config_from_json(to_json(c));
    CHECK(to_json(again) == to_json(c));
  }
}

TEST_CASE("overrides") {
  nlohmann::json doc = nlohmann::json::parse(R"({"attack": {"lambda": 0.1}})");
  apply_override(doc, "attack.lambda=0.5");
  apply_override(doc, "attack.phase=texture");
  apply_override(doc, "eval.frustum_source=\"ground_truth\"");
  apply_override(doc, "dataset.synthetic.num_scenes=7");
  CHECK(doc["attack"]["lambda"] == 0.5);
  CHECK(doc["attack"]["phase"] == "texture");
  CHECK(doc["eval"]["frustum_source"] == "ground_truth");
  CHECK(doc["dataset"]["synthetic"]["num_scenes"] == 7);
  const RunConfig c = run_config_from_json(doc);
  CHECK(c.attack.lambda == 0.5);
  CHECK(c.attack.phase == AttackPhase::Texture);
  CHECK(c.dataset.synthetic.num_scenes == 7);
  CHECK(c.eval.frustum_source == FrustumSource::GroundTruth);

  CHECK_THROWS_AS(apply_override(doc, "novalue"), std::invalid_argument);
  CHECK_THROWS_AS(apply_override(doc, "=3"), std::invalid_argument);
  CHECK_THROWS_AS(apply_override(doc, "attack..lambda=3"), std::invalid_argument);
  apply_override(doc, "attack.lamda=3");
  CHECK_THROWS_AS(run_config_from_json(doc), std::invalid_argument);
}

TEST_CASE("attack row names") {
  CHECK(parse_attack_rows("all").size() == 4);
  CHECK(parse_attack_rows("pc+img") == std::vector<AttackRow>{AttackRow::Both});
  CHECK(std::string(attack_row_label(AttackRow::None)) == "No Attack");
  CHECK_THROWS_AS(parse_attack_rows("mesh"), std::invalid_argument);
}

TEST_CASE("missing prerequisites are named") {
  const fs::path dir = scratch("missing");
  RunConfig cfg = run_config_from_json(nlohmann::json{{"output_dir", dir.string()}});
  CHECK(error_of([&] { load_scenes(cfg); }).find("gen-scenes") != std::string::npos);
  CHECK(error_of([&] { load_victim(cfg, false); }).find("train-victim") != std::string::npos);
  CHECK(error_of([&] { load_attack_params(cfg, AttackPhase::Shape); }).find("attack --phase shape") !=
        std::string::npos);
  CHECK(error_of([&] { load_attack_params(cfg, AttackPhase::Texture); }).find("attack --phase texture") !=
        std::string::npos);
  CHECK(error_of([&] { attack_cmd(cfg, AttackPhase::Shape); }).find("train-victim") != std::string::npos);
  CHECK(error_of([&] { render_cmd(cfg, "000000"); }).find("gen-scenes") != std::string::npos);
  CHECK(error_of([&] { export_mesh_cmd(dir / "none.ckpt", dir / "m.ply"); }).find("attack") != std::string::npos);

  RunConfig kitti = cfg;
  kitti.dataset.source = DatasetSource::Kitti;
  kitti.dataset.path = dir / "kitti";
  CHECK(error_of([&] { load_scenes(kitti); }).find("label_2") != std::string::npos);
  CHECK(error_of([&] { gen_scenes(kitti); }).find("synthetic") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("victim gates") {
  VictimReport r;
  r.seg_accuracy = 0.95;
  r.clean_bev_ap = 0.85;
  CHECK(victim_gates_met(r));
  r.clean_bev_ap = 0.79;
  CHECK_FALSE(victim_gates_met(r));
  r.clean_bev_ap = 0.85;
  r.seg_accuracy = 0.89;
  CHECK_FALSE(victim_gates_met(r));
  const VictimReport back = victim_report_from_json(to_json(r));
  CHECK(back.seg_accuracy == r.seg_accuracy);
  CHECK(back.clean_bev_ap == r.clean_bev_ap);
}

TEST_CASE("export-mesh writes a PLY that reads back") {
  const fs::path dir = scratch("export");
  AttackParams p = AttackParams::initial(1, 0.4);
  oracle::Gen g(701);
  for (auto& v : p.displacement.values()) v = g.normal(0.02);
  for (auto& v : p.colors.values()) v = g.uniform(0, 1);
  AttackConfig cfg;
  cfg.subdivisions = 1;
  save_checkpoint(dir / "mesh.ckpt", attack_checkpoint(p, cfg));
  export_mesh_cmd(dir / "mesh.ckpt", dir / "out" / "mesh.ply");
  const TriMesh m = read_ply(dir / "out" / "mesh.ply");
  const TriMesh want = p.object_mesh();
  CHECK(m.vertices == want.vertices);
  CHECK(m.faces == want.faces);
  REQUIRE(m.colors.size() == want.colors.size());
  for (std::size_t i = 0; i < m.colors.size(); ++i)
    for (int k = 0; k < 3; ++k) CHECK(std::abs(m.colors[i][k] - want.colors[i][k]) <= 0.5 / 255.0 + 1e-12);
  export_mesh_cmd(dir / "mesh.ckpt", dir / "mesh.obj");
  CHECK(fs::file_size(dir / "mesh.obj") > 0);
  fs::remove_all(dir);
}

TEST_CASE("end-to-end on a tiny dataset") {
  const fs::path dir = scratch("e2e");
  const RunConfig cfg = run_config_from_json(tiny_run(dir));
  echo_config(cfg);
  {
    std::ifstream in(dir / "config.json");
    const auto echoed = nlohmann::json::parse(in);
    CHECK(echoed == to_json(cfg));
  }
  CHECK(gen_scenes(cfg) == 12);
  const Split split = split_scenes(load_scenes(cfg));
  CHECK(split.train.size() + split.val.size() == 12);
  for (const auto& s : split.train) CHECK(is_training_scene(s.id));

  const VictimRun vr = train_victim_cmd(cfg);
  CHECK(fs::exists(dir / "victim.ckpt"));
  CHECK(fs::exists(dir / "victim_report.json"));
  RunConfig gated = cfg;
  gated.enforce_victim_gates = true;
  if (!victim_gates_met(vr.report))
    CHECK(error_of([&] { attack_cmd(gated, AttackPhase::Shape); }).find("gates unmet") != std::string::npos);

  CHECK(error_of([&] { attack_cmd(cfg, AttackPhase::Texture); }).find("attack --phase shape") != std::string::npos);
  const AttackRun shape = attack_cmd(cfg, AttackPhase::Shape);
  CHECK(shape.trail.size() == std::size_t((split.train.size() + 3) / 4));
  CHECK(fs::exists(mesh_checkpoint_path(cfg, AttackPhase::Shape)));
  CHECK(fs::exists(loss_csv_path(cfg, AttackPhase::Shape)));
  const AttackRun texture = attack_cmd(cfg, AttackPhase::Texture);
  CHECK(texture.params.displacement_values() == shape.params.displacement_values());

  const EvalResult ev = eval_cmd(cfg, parse_attack_rows("all"));
  CHECK(ev.rows.size() == 4);
  CHECK(ev.text.find("PC + Img: Adv Object") != std::string::npos);
  CHECK(ev.csv.rfind("attack,easy,moderate,hard\n", 0) == 0);
  CHECK(fs::exists(dir / "eval_all.csv"));
  for (const auto& r : ev.rows)
    for (const auto& ap : r.ap) {
      CHECK(ap.ap >= 0.0);
      CHECK(ap.ap <= 1.0);
    }

  const fs::path det = detect_cmd(cfg, AttackRow::None);
  std::size_t files = 0;
  for (const auto& s : split.val) {
    const auto lines = read_label_lines(det / (s.id + ".txt"), s.calib);
    for (const auto& l : lines) {
      REQUIRE(l.score);
      CHECK(*l.score >= 0.0);
      CHECK(*l.score <= 1.0);
    }
    ++files;
  }
  CHECK(files == split.val.size());

  const RenderResult rr = render_cmd(cfg, split.val.front().id);
  CHECK(read_velodyne(rr.attacked_bin).size() >= read_velodyne(rr.clean_bin).size());
  CHECK(read_png(rr.attacked_png).width == read_png(rr.clean_png).width);
  fs::remove_all(dir);
}
