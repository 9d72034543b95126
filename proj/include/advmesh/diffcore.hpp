#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "advmesh/vec.hpp"

namespace advmesh {

// A named, flat block of learnable scalars with its gradient accumulator and
// optional per-scalar bounds.
class ParamBlock {
 public:
  ParamBlock() = default;
  ParamBlock(std::string name, std::vector<std::size_t> shape, double fill = 0.0);

  const std::string& name() const { return name_; }
  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t size() const { return values_.size(); }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::span<double> grad() { return grad_; }
  std::span<const double> grad() const { return grad_; }

  void zero_grad();
  void set_bounds(double lo, double hi);
  bool bounded() const { return !lower_.empty(); }
  double lower(std::size_t i) const { return lower_.at(i); }
  double upper(std::size_t i) const { return upper_.at(i); }
  // Clamps values into bounds; no-op for unbounded blocks.
  void project_to_bounds();

  // Views for blocks shaped (n x 3).
  std::vector<Vec3> as_vec3() const;
  void assign_vec3(const std::vector<Vec3>& v);
  void accumulate_grad_vec3(const std::vector<Vec3>& g);

 private:
  std::string name_;
  std::vector<std::size_t> shape_;
  std::vector<double> values_;
  std::vector<double> grad_;
  std::vector<double> lower_;
  std::vector<double> upper_;
};

struct AdamConfig {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;

  AdamState() = default;
  AdamState(AdamConfig cfg, std::size_t n) : config(cfg), m(n, 0.0), v(n, 0.0) {}
};

// Bias-corrected Adam update followed by projection onto the block bounds.
// Gradients are left untouched.
void adam_step(ParamBlock& params, AdamState& state);
// The same update on raw buffers, without bounds.
void adam_update(std::span<double> values, std::span<const double> grad, AdamState& state);

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  std::vector<std::size_t> failing;
  std::vector<double> numeric;
  std::vector<double> analytic;
  bool passed() const { return failing.empty(); }
};

// Compares params.grad() against central differences of `f`. The relative
// error of entry i is |a - n| / max(1, |a|, |n|). Throws std::runtime_error
// when f evaluates to a non-finite value.
FiniteDiffReport finite_diff_check(const std::function<double(const ParamBlock&)>& f,
                                   const ParamBlock& params, double epsilon, double tolerance);

// Sums per-worker gradient buffers into `target` in index order.
void reduce_grads(std::span<const std::vector<double>> buffers, std::span<double> target);

// Checkpoint layout: 8-byte magic, u64 header length, JSON header, then the
// raw little-endian float64 values of each block in header order.
struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<ParamBlock> blocks;

  const ParamBlock& block(const std::string& name) const;
  ParamBlock& block(const std::string& name);
  bool has_block(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::json adam_to_json(const AdamState& s);

}  // namespace advmesh
