#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "advmesh/victim.hpp"

namespace advmesh {
namespace {

constexpr double kLeak = 0.1;
constexpr double kMaxLogScale = 4.0;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct Cell {
  int x0, y0, x1, y1;  // clipped, half-open
  double inv_area;
};

// Integral images of (pixel - 0.5) per channel, then of its square; each (w+1) x (h+1).
std::vector<double> integral(const Image& image) {
  const int w = image.width, h = image.height;
  std::vector<double> ii(std::size_t(6) * (w + 1) * (h + 1), 0.0);
  for (int c = 0; c < 6; ++c) {
    double* plane = ii.data() + std::size_t(c) * (w + 1) * (h + 1);
    for (int y = 0; y < h; ++y) {
      double row = 0.0;
      for (int x = 0; x < w; ++x) {
        const double v = image.at(x, y, c % 3) - 0.5;
        row += c < 3 ? v : v * v;
        plane[std::size_t(y + 1) * (w + 1) + x + 1] = plane[std::size_t(y) * (w + 1) + x + 1] + row;
      }
    }
  }
  return ii;
}

template <typename F>
void for_each_cell(const ScorerConfig& cfg, const Anchor& a, int width, int height, F&& f) {
  const int cw = cfg.window_width / cfg.pool_cols;
  const int ch = cfg.window_height / cfg.pool_rows;
  const int left = static_cast<int>(std::lround(a.cx - 0.5 * cfg.window_width));
  const int top = static_cast<int>(std::lround(a.cy - 0.5 * cfg.window_height));
  const double inv_area = 1.0 / (double(cw) * double(ch));
  for (int r = 0; r < cfg.pool_rows; ++r) {
    for (int c = 0; c < cfg.pool_cols; ++c) {
      Cell cell{std::clamp(left + c * cw, 0, width), std::clamp(top + r * ch, 0, height),
                std::clamp(left + (c + 1) * cw, 0, width), std::clamp(top + (r + 1) * ch, 0, height), inv_area};
      f(r * cfg.pool_cols + c, cell);
    }
  }
}

}  // namespace

void Dense::init(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / std::max(in, 1)));
  for (auto& x : w) x = dist(rng);
  std::fill(b.begin(), b.end(), 0.0);
}

void Dense::forward(const double* x, double* y) const {
  for (int o = 0; o < out; ++o) {
    const double* row = w.data() + std::size_t(o) * in;
    double acc = b[o];
    for (int i = 0; i < in; ++i) acc += row[i] * x[i];
    y[o] = acc;
  }
}

void Dense::backward(const double* x, const double* dy, double* dx, Dense* grads) const {
  for (int o = 0; o < out; ++o) {
    const double g = dy[o];
    if (g == 0.0) continue;
    const double* row = w.data() + std::size_t(o) * in;
    if (dx)
      for (int i = 0; i < in; ++i) dx[i] += row[i] * g;
    if (grads) {
      double* grow = grads->w.data() + std::size_t(o) * in;
      for (int i = 0; i < in; ++i) grow[i] += g * x[i];
      grads->b[o] += g;
    }
  }
}

Scorer2D::Scorer2D(const ScorerConfig& cfg, std::uint64_t seed)
    : cfg_(cfg),
      layer1_(cfg.feature_count(), cfg.hidden),
      objectness_(cfg.hidden, 1),
      box_(cfg.hidden, 4) {
  layer1_.init(seed * 3 + 1);
  objectness_.init(seed * 3 + 2);
  box_.init(seed * 3 + 3);
  for (auto& x : box_.w) x *= 0.1;
  objectness_.b[0] = -2.0;
}

std::vector<Anchor> Scorer2D::anchors(int width, int height) const {
  std::vector<Anchor> out;
  const int nx = width / cfg_.stride, ny = height / cfg_.stride;
  for (int y = 0; y < ny; ++y)
    for (int x = 0; x < nx; ++x) out.push_back({cfg_.stride * (x + 0.5), cfg_.stride * (y + 0.5)});
  return out;
}

void Scorer2D::pooled_features(const Image& image, const std::vector<Anchor>& anchors,
                               std::vector<double>& out) const {
  const int nf = cfg_.feature_count();
  const int cells = cfg_.pool_cols * cfg_.pool_rows;
  const int w = image.width, h = image.height;
  const auto ii = integral(image);
  const std::size_t plane = std::size_t(w + 1) * (h + 1);
  out.assign(anchors.size() * nf, 0.0);
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    double* f = out.data() + a * nf;
    for_each_cell(cfg_, anchors[a], w, h, [&](int k, const Cell& cell) {
      if (cell.x1 <= cell.x0 || cell.y1 <= cell.y0) return;
      for (int c = 0; c < 6; ++c) {
        const double* p = ii.data() + c * plane;
        auto at = [&](int x, int y) { return p[std::size_t(y) * (w + 1) + x]; };
        const double sum = at(cell.x1, cell.y1) - at(cell.x0, cell.y1) - at(cell.x1, cell.y0) + at(cell.x0, cell.y0);
        f[c * cells + k] = sum * cell.inv_area;
      }
    });
  }
}

double Scorer2D::head_forward(const double* features, double* hidden, double* box) const {
  layer1_.forward(features, hidden);
  for (int i = 0; i < cfg_.hidden; ++i) hidden[i] = leaky_relu(hidden[i], kLeak);
  double logit = 0.0;
  objectness_.forward(hidden, &logit);
  if (box) box_.forward(hidden, box);
  return logit;
}

void Scorer2D::head_backward(const double* features, const double* hidden, double dlogit, const double* dbox,
                             Scorer2D* grads, double* dfeatures) const {
  std::vector<double> dh(cfg_.hidden, 0.0);
  objectness_.backward(hidden, &dlogit, dh.data(), grads ? &grads->objectness_ : nullptr);
  if (dbox) box_.backward(hidden, dbox, dh.data(), grads ? &grads->box_ : nullptr);
  for (int i = 0; i < cfg_.hidden; ++i) dh[i] *= hidden[i] > 0.0 ? 1.0 : kLeak;
  layer1_.backward(features, dh.data(), dfeatures, grads ? &grads->layer1_ : nullptr);
}

ScorerForward Scorer2D::forward(const Image& image) const {
  ScorerForward fwd;
  fwd.width = image.width;
  fwd.height = image.height;
  fwd.image = image;
  fwd.anchors = anchors(image.width, image.height);
  pooled_features(image, fwd.anchors, fwd.features);
  const std::size_t n = fwd.anchors.size();
  const int nf = cfg_.feature_count();
  fwd.hidden.assign(n * cfg_.hidden, 0.0);
  fwd.scores.resize(n);
  fwd.boxes.resize(n);
  for (std::size_t a = 0; a < n; ++a) {
    double t[4];
    const double logit = head_forward(fwd.features.data() + a * nf, fwd.hidden.data() + a * cfg_.hidden, t);
    fwd.scores[a] = sigmoid(logit);
    const double cx = fwd.anchors[a].cx + t[0] * 0.5 * cfg_.window_width;
    const double cy = fwd.anchors[a].cy + t[1] * 0.5 * cfg_.window_height;
    const double bw = cfg_.window_width * std::exp(std::clamp(t[2], -kMaxLogScale, kMaxLogScale));
    const double bh = cfg_.window_height * std::exp(std::clamp(t[3], -kMaxLogScale, kMaxLogScale));
    Box2D b;
    b.left = std::max(0.0, cx - 0.5 * bw);
    b.right = std::min(double(image.width), cx + 0.5 * bw);
    b.top = std::max(0.0, cy - 0.5 * bh);
    b.bottom = std::min(double(image.height), cy + 0.5 * bh);
    b.score = fwd.scores[a];
    fwd.boxes[a] = b;
  }
  return fwd;
}

Image Scorer2D::backward(const ScorerForward& fwd, std::span<const double> score_grad) const {
  Image grad;
  grad.width = fwd.width;
  grad.height = fwd.height;
  grad.data.assign(std::size_t(fwd.width) * fwd.height * 3, 0.0);
  const int nf = cfg_.feature_count();
  const int cells = cfg_.pool_cols * cfg_.pool_rows;
  std::vector<double> dfeat(nf);
  for (std::size_t a = 0; a < fwd.anchors.size(); ++a) {
    if (score_grad[a] == 0.0) continue;
    const double s = fwd.scores[a];
    const double dlogit = score_grad[a] * s * (1.0 - s);
    std::fill(dfeat.begin(), dfeat.end(), 0.0);
    head_backward(fwd.features.data() + a * nf, fwd.hidden.data() + a * cfg_.hidden, dlogit, nullptr, nullptr,
                  dfeat.data());
    for_each_cell(cfg_, fwd.anchors[a], fwd.width, fwd.height, [&](int k, const Cell& cell) {
      for (int c = 0; c < 3; ++c) {
        const double g = dfeat[c * cells + k] * cell.inv_area;
        const double g2 = 2.0 * dfeat[(3 + c) * cells + k] * cell.inv_area;
        if (g == 0.0 && g2 == 0.0) continue;
        for (int y = cell.y0; y < cell.y1; ++y)
          for (int x = cell.x0; x < cell.x1; ++x) {
            const std::size_t i = (std::size_t(y) * fwd.width + x) * 3 + c;
            grad.data[i] += g + g2 * (fwd.image.data[i] - 0.5);
          }
      }
    });
  }
  return grad;
}

std::vector<ParamBlock> Scorer2D::export_blocks(const std::string& prefix) const {
  static const char* names[] = {"layer1", "objectness", "box"};
  std::vector<ParamBlock> out;
  const auto ls = layers();
  for (std::size_t i = 0; i < ls.size(); ++i) {
    ParamBlock w(prefix + names[i] + ".w", {std::size_t(ls[i]->out), std::size_t(ls[i]->in)});
    std::copy(ls[i]->w.begin(), ls[i]->w.end(), w.values().begin());
    ParamBlock b(prefix + names[i] + ".b", {std::size_t(ls[i]->out)});
    std::copy(ls[i]->b.begin(), ls[i]->b.end(), b.values().begin());
    out.push_back(std::move(w));
    out.push_back(std::move(b));
  }
  return out;
}

void Scorer2D::import_blocks(const Checkpoint& ckpt, const std::string& prefix) {
  static const char* names[] = {"layer1", "objectness", "box"};
  layer1_ = Dense(cfg_.feature_count(), cfg_.hidden);
  objectness_ = Dense(cfg_.hidden, 1);
  box_ = Dense(cfg_.hidden, 4);
  const auto ls = layers();
  for (std::size_t i = 0; i < ls.size(); ++i) {
    const auto& w = ckpt.block(prefix + names[i] + ".w");
    const auto& b = ckpt.block(prefix + names[i] + ".b");
    if (w.size() != ls[i]->w.size() || b.size() != ls[i]->b.size()) {
      throw std::runtime_error("checkpoint block " + w.name() + " does not match the scorer configuration");
    }
    std::copy(w.values().begin(), w.values().end(), ls[i]->w.begin());
    std::copy(b.values().begin(), b.values().end(), ls[i]->b.begin());
  }
}

void Scorer2D::zero() {
  for (auto* l : layers()) {
    std::fill(l->w.begin(), l->w.end(), 0.0);
    std::fill(l->b.begin(), l->b.end(), 0.0);
  }
}

std::vector<Box2D> nms(std::vector<Box2D> boxes, double iou_threshold) {
  std::stable_sort(boxes.begin(), boxes.end(), [](const Box2D& a, const Box2D& b) { return a.score > b.score; });
  std::vector<Box2D> kept;
  for (const auto& b : boxes) {
    bool keep = true;
    for (const auto& k : kept)
      if (iou_2d(b, k) >= iou_threshold) {
        keep = false;
        break;
      }
    if (keep) kept.push_back(b);
  }
  return kept;
}

std::vector<Box2D> propose_2d(const Image& image, const Scorer2D& scorer) {
  if (!scorer.trained()) throw InvalidState("propose_2d: the 2D scorer has not been trained");
  const ScorerForward fwd = scorer.forward(image);
  std::vector<Box2D> candidates;
  for (std::size_t a = 0; a < fwd.scores.size(); ++a)
    if (fwd.scores[a] >= scorer.config().threshold && fwd.boxes[a].area() > 0.0) candidates.push_back(fwd.boxes[a]);
  return nms(std::move(candidates), scorer.config().nms_iou);
}

}  // namespace advmesh
