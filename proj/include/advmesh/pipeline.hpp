#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "advmesh/attack.hpp"
#include "advmesh/dataio.hpp"
#include "advmesh/eval.hpp"
#include "advmesh/victim.hpp"

namespace advmesh {

inline constexpr double kSegAccuracyGate = 0.90;
inline constexpr double kCleanApGate = 0.80;

enum class DatasetSource { Synthetic, Kitti };

struct DatasetConfig {
  DatasetSource source = DatasetSource::Synthetic;
  std::filesystem::path path;  // empty: <output_dir>/dataset
  SynthConfig synthetic;
};

struct EvalRunConfig {
  EvalConfig metric;
  FrustumSource frustum_source = FrustumSource::Detector;
  double recall_iou = 0.5;  // 2D match for proposal recall
  std::uint64_t seed = 1;   // frustum subsampling
};

struct RunConfig {
  std::filesystem::path output_dir = "run";
  std::optional<std::uint64_t> seed;  // when set, every module seed derives from it
  int threads = 1;
  // Attacks refuse a victim below the gates unless this is off (plumbing runs).
  bool enforce_victim_gates = true;
  DatasetConfig dataset;
  VictimConfig victim;
  VictimTrainConfig victim_train;
  AttackConfig attack;
  EvalRunConfig eval;

  std::filesystem::path dataset_dir() const;
  void validate() const;
};

nlohmann::json to_json(const SynthConfig& cfg);
SynthConfig synth_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& cfg);
// Unknown keys anywhere raise std::invalid_argument; relative paths resolve
// against `base_dir`.
RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

// Applies "a.b.c=value" overrides on top of a config document. The value is
// parsed as JSON when possible and taken as a string otherwise.
void apply_override(nlohmann::json& doc, const std::string& assignment);

// Writes config.json into the output directory.
void echo_config(const RunConfig& cfg);

// ---------------------------------------------------------------------------
// Commands. Each throws std::runtime_error naming the missing prerequisite.

struct Split {
  std::vector<Scene> train;
  std::vector<Scene> val;
};

std::vector<Scene> load_scenes(const RunConfig& cfg);
Split split_scenes(std::vector<Scene> scenes);

std::size_t gen_scenes(const RunConfig& cfg);

struct VictimRun {
  Victim victim;
  VictimReport report;
};

bool victim_gates_met(const VictimReport& r);
nlohmann::json to_json(const VictimReport& r);
VictimReport victim_report_from_json(const nlohmann::json& j);

VictimRun train_victim_cmd(const RunConfig& cfg);
// Loads the victim; with `require_gates`, refuses one whose recorded report
// misses the accuracy or AP gate.
VictimRun load_victim(const RunConfig& cfg, bool require_gates);

struct AttackRun {
  AttackParams params;
  std::vector<LossReport> trail;
};

std::filesystem::path mesh_checkpoint_path(const RunConfig& cfg, AttackPhase phase);
std::filesystem::path loss_csv_path(const RunConfig& cfg, AttackPhase phase);

// Shape starts from the icosphere; texture continues from the shape checkpoint.
AttackRun attack_cmd(const RunConfig& cfg, AttackPhase phase);
AttackParams load_attack_params(const RunConfig& cfg, AttackPhase phase);

enum class AttackRow { None, PointCloud, Image, Both };

const char* attack_row_label(AttackRow row);
const char* attack_row_key(AttackRow row);
// "none" | "pc" | "img" | "pc+img" | "all"
std::vector<AttackRow> parse_attack_rows(const std::string& s);

// The validation scenes as the victim sees them under one attack row.
std::vector<Scene> attacked_scenes(const std::vector<Scene>& scenes, const AttackParams& params,
                                   const AttackConfig& cfg, AttackRow row);

struct RowResult {
  AttackRow row = AttackRow::None;
  std::array<APReport, 3> ap;  // Easy, Moderate, Hard
  double proposal_recall = 0.0;
};

RowResult evaluate_row(const Victim& victim, const std::vector<Scene>& val, const AttackParams* params,
                       const RunConfig& cfg, AttackRow row);

struct EvalResult {
  std::vector<RowResult> rows;
  std::string text;
  std::string csv;
};

EvalResult eval_cmd(const RunConfig& cfg, const std::vector<AttackRow>& rows);

// Runs the victim on the validation scenes under one attack row and writes
// one KITTI label file per scene, each line carrying the detection score.
// Returns the directory written.
std::filesystem::path detect_cmd(const RunConfig& cfg, AttackRow row);

struct RenderResult {
  std::filesystem::path clean_png, attacked_png, clean_bin, attacked_bin;
};

RenderResult render_cmd(const RunConfig& cfg, const std::string& scene_id);

void export_mesh_cmd(const std::filesystem::path& checkpoint, const std::filesystem::path& out);

}  // namespace advmesh
