#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "advmesh/pipeline.hpp"

namespace fs = std::filesystem;
using namespace advmesh;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::string output;
  int threads = 0;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "JSON run configuration")->check(CLI::ExistingFile);
  cmd->add_option("--set", c.overrides, "Override a config key, e.g. --set attack.lambda=0.5");
  cmd->add_option("-o,--output", c.output, "Output directory (overrides output_dir)");
  cmd->add_option("--threads", c.threads, "Worker threads (overrides threads)")->check(CLI::PositiveNumber);
}

// Precedence: defaults < config file < --set < dedicated flags.
RunConfig resolve_config(const Common& c) {
  nlohmann::json doc = nlohmann::json::object();
  fs::path base = fs::current_path();
  if (!c.config.empty()) {
    std::ifstream in(c.config);
    in >> doc;
    base = fs::absolute(c.config).parent_path();
  }
  for (const auto& o : c.overrides) apply_override(doc, o);
  if (!c.output.empty()) doc["output_dir"] = fs::absolute(c.output).string();
  if (c.threads > 0) doc["threads"] = c.threads;
  RunConfig cfg = run_config_from_json(doc, base);
  echo_config(cfg);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Universal adversarial mesh attack on a cascaded image + LiDAR car detector"};
  app.require_subcommand(1);

  Common gen_opts, train_opts, attack_opts, render_opts, eval_opts, detect_opts;
  std::string phase = "shape", scene_id, rows = "all", detect_row = "none", ckpt_path, mesh_out;

  auto* gen = app.add_subcommand("gen-scenes", "Generate the synthetic dataset in KITTI layout");
  add_common(gen, gen_opts);
  auto* train = app.add_subcommand("train-victim", "Train the 2D scorer and point segmentation network");
  add_common(train, train_opts);
  auto* attack = app.add_subcommand("attack", "Optimize the universal mesh (shape, then texture)");
  add_common(attack, attack_opts);
  attack->add_option("--phase", phase, "shape | texture")->check(CLI::IsMember({"shape", "texture"}));
  auto* render = app.add_subcommand("render", "Write clean and attacked image and point cloud for one scene");
  add_common(render, render_opts);
  render->add_option("--scene", scene_id, "Scene id")->required();
  auto* eval = app.add_subcommand("eval", "Report BEV AP per difficulty for the selected attack rows");
  add_common(eval, eval_opts);
  eval->add_option("--attack", rows, "none | pc | img | pc+img | all")
      ->check(CLI::IsMember({"none", "pc", "img", "pc+img", "all"}));
  auto* det = app.add_subcommand("detect", "Write victim detections on the validation scenes as KITTI label lines");
  add_common(det, detect_opts);
  det->add_option("--attack", detect_row, "none | pc | img | pc+img")
      ->check(CLI::IsMember({"none", "pc", "img", "pc+img"}));
  auto* exp = app.add_subcommand("export-mesh", "Export a mesh checkpoint as PLY (or OBJ by extension)");
  exp->add_option("checkpoint", ckpt_path, "Mesh checkpoint")->required();
  exp->add_option("out", mesh_out, "Output .ply or .obj")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      const RunConfig cfg = resolve_config(gen_opts);
      const std::size_t n = gen_scenes(cfg);
      std::printf("wrote %zu scenes to %s\n", n, cfg.dataset_dir().string().c_str());
    } else if (train->parsed()) {
      const RunConfig cfg = resolve_config(train_opts);
      const VictimRun run = train_victim_cmd(cfg);
      std::printf("segmentation accuracy %.4f (gate %.2f)\nclean BEV AP @0.5 %.4f (gate %.2f)\nproposal recall %.4f\n",
                  run.report.seg_accuracy, kSegAccuracyGate, run.report.clean_bev_ap, kCleanApGate,
                  run.report.scorer_recall);
      if (!victim_gates_met(run.report)) {
        if (cfg.enforce_victim_gates) {
          std::fprintf(stderr, "victim gates unmet; attacks will refuse this checkpoint\n");
          return 2;
        }
        std::fprintf(stderr, "warning: victim gates unmet (not enforced by this config)\n");
      }
    } else if (attack->parsed()) {
      const RunConfig cfg = resolve_config(attack_opts);
      const AttackPhase p = parse_phase(phase);
      const AttackRun run = attack_cmd(cfg, p);
      const auto means = epoch_means(run.trail, p);
      for (std::size_t e = 0; e < means.size(); ++e) std::printf("epoch %zu mean loss %.6f\n", e, means[e]);
      std::printf("wrote %s and %s\n", mesh_checkpoint_path(cfg, p).string().c_str(),
                  loss_csv_path(cfg, p).string().c_str());
    } else if (render->parsed()) {
      const RunConfig cfg = resolve_config(render_opts);
      const RenderResult r = render_cmd(cfg, scene_id);
      std::printf("wrote %s, %s, %s, %s\n", r.clean_png.string().c_str(), r.attacked_png.string().c_str(),
                  r.clean_bin.string().c_str(), r.attacked_bin.string().c_str());
    } else if (eval->parsed()) {
      const RunConfig cfg = resolve_config(eval_opts);
      const EvalResult r = eval_cmd(cfg, parse_attack_rows(rows));
      std::fputs(r.text.c_str(), stdout);
      for (const auto& row : r.rows)
        std::printf("%s proposal recall %.4f\n", attack_row_label(row.row), row.proposal_recall);
    } else if (det->parsed()) {
      const RunConfig cfg = resolve_config(detect_opts);
      const fs::path dir = detect_cmd(cfg, parse_attack_rows(detect_row).front());
      std::printf("wrote %s\n", dir.string().c_str());
    } else if (exp->parsed()) {
      export_mesh_cmd(ckpt_path, mesh_out);
      std::printf("wrote %s\n", mesh_out.c_str());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
