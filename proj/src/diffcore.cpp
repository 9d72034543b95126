#include "advmesh/diffcore.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace advmesh {

namespace {
constexpr char kMagic[8] = {'A', 'D', 'V', 'M', 'C', 'K', 'P', '1'};
}

ParamBlock::ParamBlock(std::string name, std::vector<std::size_t> shape, double fill)
    : name_(std::move(name)), shape_(std::move(shape)) {
  const std::size_t n = std::accumulate(shape_.begin(), shape_.end(), std::size_t{1},
                                        std::multiplies<>());
  values_.assign(n, fill);
  grad_.assign(n, 0.0);
}

void ParamBlock::zero_grad() { std::fill(grad_.begin(), grad_.end(), 0.0); }

void ParamBlock::set_bounds(double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("ParamBlock bounds must satisfy lo <= hi");
  lower_.assign(values_.size(), lo);
  upper_.assign(values_.size(), hi);
}

void ParamBlock::project_to_bounds() {
  if (lower_.empty()) return;
  for (std::size_t i = 0; i < values_.size(); ++i)
    values_[i] = std::clamp(values_[i], lower_[i], upper_[i]);
}

std::vector<Vec3> ParamBlock::as_vec3() const {
  if (values_.size() % 3 != 0) throw std::invalid_argument(name_ + " is not shaped (n x 3)");
  std::vector<Vec3> out(values_.size() / 3);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = {values_[3 * i], values_[3 * i + 1], values_[3 * i + 2]};
  return out;
}

void ParamBlock::assign_vec3(const std::vector<Vec3>& v) {
  if (v.size() * 3 != values_.size()) throw std::invalid_argument(name_ + ": size mismatch");
  for (std::size_t i = 0; i < v.size(); ++i) {
    values_[3 * i] = v[i].x;
    values_[3 * i + 1] = v[i].y;
    values_[3 * i + 2] = v[i].z;
  }
}

void ParamBlock::accumulate_grad_vec3(const std::vector<Vec3>& g) {
  if (g.size() * 3 != grad_.size()) throw std::invalid_argument(name_ + ": grad size mismatch");
  for (std::size_t i = 0; i < g.size(); ++i) {
    grad_[3 * i] += g[i].x;
    grad_[3 * i + 1] += g[i].y;
    grad_[3 * i + 2] += g[i].z;
  }
}

void adam_step(ParamBlock& params, AdamState& state) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw std::invalid_argument("adam_step: moment buffers do not match " + params.name());
  }
  adam_update(params.values(), params.grad(), state);
  params.project_to_bounds();
}

void adam_update(std::span<double> values, std::span<const double> grad, AdamState& state) {
  if (state.m.size() != values.size() || grad.size() != values.size()) {
    throw std::invalid_argument("adam_update: buffer sizes disagree");
  }
  const auto& c = state.config;
  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < values.size(); ++i) {
    state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * grad[i];
    state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    values[i] -= c.lr * m_hat / (std::sqrt(v_hat) + c.eps);
  }
}

FiniteDiffReport finite_diff_check(const std::function<double(const ParamBlock&)>& f,
                                   const ParamBlock& params, double epsilon, double tolerance) {
  FiniteDiffReport report;
  ParamBlock probe = params;
  const auto base = params.values();
  report.numeric.resize(params.size());
  report.analytic.assign(params.grad().begin(), params.grad().end());
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto vals = probe.values();
    vals[i] = base[i] + epsilon;
    const double fp = f(probe);
    vals[i] = base[i] - epsilon;
    const double fm = f(probe);
    vals[i] = base[i];
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw std::runtime_error("finite_diff_check: non-finite objective at index " +
                               std::to_string(i) + " of " + params.name());
    }
    const double numeric = (fp - fm) / (2.0 * epsilon);
    const double analytic = report.analytic[i];
    report.numeric[i] = numeric;
    const double denom = std::max({1.0, std::abs(analytic), std::abs(numeric)});
    const double rel = std::abs(analytic - numeric) / denom;
    report.max_rel_error = std::max(report.max_rel_error, rel);
    if (rel > tolerance) report.failing.push_back(i);
  }
  return report;
}

void reduce_grads(std::span<const std::vector<double>> buffers, std::span<double> target) {
  for (const auto& buf : buffers) {
    if (buf.size() != target.size()) throw std::invalid_argument("reduce_grads: size mismatch");
    for (std::size_t i = 0; i < buf.size(); ++i) target[i] += buf[i];
  }
}

const ParamBlock& Checkpoint::block(const std::string& name) const {
  for (const auto& b : blocks)
    if (b.name() == name) return b;
  throw std::out_of_range("checkpoint has no block '" + name + "'");
}

ParamBlock& Checkpoint::block(const std::string& name) {
  for (auto& b : blocks)
    if (b.name() == name) return b;
  throw std::out_of_range("checkpoint has no block '" + name + "'");
}

bool Checkpoint::has_block(const std::string& name) const {
  return std::any_of(blocks.begin(), blocks.end(), [&](const auto& b) { return b.name() == name; });
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json header;
  header["meta"] = ckpt.meta;
  header["blocks"] = nlohmann::json::array();
  for (const auto& b : ckpt.blocks) {
    nlohmann::json jb;
    jb["name"] = b.name();
    jb["shape"] = b.shape();
    jb["size"] = b.size();
    if (b.bounded()) jb["bounds"] = {b.lower(0), b.upper(0)};
    header["blocks"].push_back(jb);
  }
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(kMagic, sizeof(kMagic));
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& b : ckpt.blocks) {
    const auto v = b.values();
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error(path.string() + ": not a checkpoint file");
  }
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error(path.string() + ": truncated header");
  const auto header = nlohmann::json::parse(text);
  Checkpoint ckpt;
  ckpt.meta = header.at("meta");
  for (const auto& jb : header.at("blocks")) {
    ParamBlock b(jb.at("name").get<std::string>(), jb.at("shape").get<std::vector<std::size_t>>());
    if (b.size() != jb.at("size").get<std::size_t>()) {
      throw std::runtime_error(path.string() + ": block size disagrees with shape");
    }
    if (jb.contains("bounds")) b.set_bounds(jb["bounds"][0], jb["bounds"][1]);
    auto v = b.values();
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!in) throw std::runtime_error(path.string() + ": truncated block " + b.name());
    ckpt.blocks.push_back(std::move(b));
  }
  return ckpt;
}

nlohmann::json adam_to_json(const AdamState& s) {
  return {{"lr", s.config.lr}, {"beta1", s.config.beta1}, {"beta2", s.config.beta2},
          {"eps", s.config.eps}, {"step", s.step}};
}

}  // namespace advmesh
