#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "xfic/binary_io.hpp"
#include "xfic/embedding_space.hpp"
#include "xfic/error.hpp"
#include "xfic/matrix.hpp"
#include "xfic/rng.hpp"

namespace xfic {

inline constexpr double kTauMin = 1e-3;
inline constexpr double kTauMax = 0.5;

/// Two linear maps into a shared space plus a learnable temperature.
///
/// Parameters live in one flat vector in checkpoint order: W_img (d_img x
/// d_shared, row-major), b_img, W_txt (d_txt x d_shared), b_txt, log_tau.
class ProjectionHead {
 public:
  ProjectionHead() = default;
  ProjectionHead(std::size_t d_img, std::size_t d_txt, std::size_t d_shared)
      : d_img_(d_img), d_txt_(d_txt), d_shared_(d_shared),
        params_((d_img + 1 + d_txt + 1) * d_shared + 1, 0.0) {
    if (d_img < 1 || d_txt < 1 || d_shared < 1) throw UsageError("projection head dimensions must be positive");
  }

  /// Weights ~ N(0, 1/fan_in), zero biases, temperature tau_init.
  static ProjectionHead random(std::size_t d_img, std::size_t d_txt, std::size_t d_shared, double tau_init,
                               std::uint64_t seed) {
    if (!(tau_init > 0.0)) throw UsageError("tau_init must be positive");
    ProjectionHead h(d_img, d_txt, d_shared);
    Rng rng(seed);
    const double si = 1.0 / std::sqrt(static_cast<double>(d_img));
    const double st = 1.0 / std::sqrt(static_cast<double>(d_txt));
    for (std::size_t i = 0; i < d_img * d_shared; ++i) h.params_[h.w_img_offset() + i] = si * rng.normal();
    for (std::size_t i = 0; i < d_txt * d_shared; ++i) h.params_[h.w_txt_offset() + i] = st * rng.normal();
    h.params_.back() = std::log(std::clamp(tau_init, kTauMin, kTauMax));
    return h;
  }

  std::size_t d_img() const noexcept { return d_img_; }
  std::size_t d_txt() const noexcept { return d_txt_; }
  std::size_t d_shared() const noexcept { return d_shared_; }

  std::span<double> params() noexcept { return params_; }
  std::span<const double> params() const noexcept { return params_; }
  std::size_t parameter_count() const noexcept { return params_.size(); }

  std::size_t w_img_offset() const noexcept { return 0; }
  std::size_t b_img_offset() const noexcept { return d_img_ * d_shared_; }
  std::size_t w_txt_offset() const noexcept { return b_img_offset() + d_shared_; }
  std::size_t b_txt_offset() const noexcept { return w_txt_offset() + d_txt_ * d_shared_; }
  std::size_t log_tau_offset() const noexcept { return params_.size() - 1; }

  double log_tau() const noexcept { return params_.back(); }
  double tau() const noexcept { return std::exp(params_.back()); }
  void set_log_tau(double v) noexcept { params_.back() = v; }

  void clamp_tau() noexcept {
    params_.back() = std::clamp(params_.back(), std::log(kTauMin), std::log(kTauMax));
  }

  /// x W_img + b_img (not normalized).
  std::vector<double> project_img(std::span<const double> x) const {
    return project(x, d_img_, w_img_offset(), b_img_offset());
  }
  std::vector<double> project_txt(std::span<const double> x) const {
    return project(x, d_txt_, w_txt_offset(), b_txt_offset());
  }

  /// Weight-decay multipliers: 1 on weight matrices, 0 on biases and log_tau.
  std::vector<double> decay_mask() const {
    std::vector<double> mask(params_.size(), 0.0);
    std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(w_img_offset()), d_img_ * d_shared_, 1.0);
    std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(w_txt_offset()), d_txt_ * d_shared_, 1.0);
    return mask;
  }

  friend bool operator==(const ProjectionHead&, const ProjectionHead&) = default;

 private:
  std::vector<double> project(std::span<const double> x, std::size_t d_in, std::size_t w_off,
                              std::size_t b_off) const {
    if (x.size() != d_in) throw ShapeError("projection input has wrong dimension");
    std::vector<double> y(params_.begin() + static_cast<std::ptrdiff_t>(b_off),
                          params_.begin() + static_cast<std::ptrdiff_t>(b_off + d_shared_));
    for (std::size_t a = 0; a < d_in; ++a) {
      const double xa = x[a];
      const double* w = params_.data() + w_off + a * d_shared_;
      for (std::size_t c = 0; c < d_shared_; ++c) y[c] += xa * w[c];
    }
    return y;
  }

  std::size_t d_img_ = 0, d_txt_ = 0, d_shared_ = 0;
  std::vector<double> params_;
};

/// Curation-space vector of a pair as seen through the head: each projected
/// half re-normalized, halves selected and concatenated per mode.
inline std::vector<double> unify_projected(const EmbeddingPair& pair, const ProjectionHead& head,
                                           CurationSpace mode) {
  return unify(head.project_img(pair.img), head.project_txt(pair.txt), mode);
}

namespace detail {

struct SimilarityStats {
  Matrix logits;    // s * u_i . v_j
  Matrix row_soft;  // softmax over j
  Matrix col_soft;  // softmax over i
  double loss = 0.0;
};

inline SimilarityStats contrastive_forward(const Matrix& u, const Matrix& v, double inv_tau) {
  const std::size_t b = u.rows();
  SimilarityStats st{Matrix(b, b), Matrix(b, b), Matrix(b, b), 0.0};
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j) st.logits(i, j) = inv_tau * dot(u.row(i), v.row(j));

  double row_loss = 0.0, col_loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    double m = st.logits(i, 0);
    for (std::size_t j = 1; j < b; ++j) m = std::max(m, st.logits(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < b; ++j) s += std::exp(st.logits(i, j) - m);
    for (std::size_t j = 0; j < b; ++j) st.row_soft(i, j) = std::exp(st.logits(i, j) - m) / s;
    row_loss += m + std::log(s) - st.logits(i, i);
  }
  for (std::size_t j = 0; j < b; ++j) {
    double m = st.logits(0, j);
    for (std::size_t i = 1; i < b; ++i) m = std::max(m, st.logits(i, j));
    double s = 0.0;
    for (std::size_t i = 0; i < b; ++i) s += std::exp(st.logits(i, j) - m);
    for (std::size_t i = 0; i < b; ++i) st.col_soft(i, j) = std::exp(st.logits(i, j) - m) / s;
    col_loss += m + std::log(s) - st.logits(j, j);
  }
  st.loss = 0.5 * (row_loss + col_loss) / static_cast<double>(b);
  return st;
}

}  // namespace detail

/// Symmetric InfoNCE over a batch of matched, unit-norm rows.
inline double info_nce(const Matrix& projected_img, const Matrix& projected_txt, double tau) {
  if (!(tau > 0.0)) throw UsageError("parameter error: temperature must be positive");
  if (projected_img.rows() < 1) throw ShapeError("info_nce needs a nonempty batch");
  if (projected_img.rows() != projected_txt.rows() || projected_img.cols() != projected_txt.cols())
    throw ShapeError("info_nce: image and text batches differ in shape");
  return detail::contrastive_forward(projected_img, projected_txt, 1.0 / tau).loss;
}

struct LossAndGradient {
  double loss = 0.0;
  std::vector<double> grad;  // same layout as ProjectionHead::params()
};

/// InfoNCE through projection and row normalization, with analytic gradients
/// for every head parameter including log_tau.
inline LossAndGradient info_nce_grad(const Matrix& raw_img, const Matrix& raw_txt, const ProjectionHead& head) {
  const std::size_t b = raw_img.rows();
  if (b < 1 || raw_txt.rows() != b) throw ShapeError("info_nce_grad: batch sizes differ or are empty");
  if (raw_img.cols() != head.d_img() || raw_txt.cols() != head.d_txt())
    throw ShapeError("info_nce_grad: input dimensions do not match the head");
  const std::size_t ds = head.d_shared();

  Matrix u(b, ds), v(b, ds);
  std::vector<double> ru(b), rv(b);
  auto project_rows = [&](const Matrix& raw, bool image, Matrix& out, std::vector<double>& norms) {
    for (std::size_t i = 0; i < b; ++i) {
      auto y = image ? head.project_img(raw.row(i)) : head.project_txt(raw.row(i));
      const double r = std::sqrt(dot(y, y));
      if (!(r > 0.0) || !std::isfinite(r)) throw NumericalError("projection collapsed to a zero vector");
      norms[i] = r;
      for (std::size_t c = 0; c < ds; ++c) out(i, c) = y[c] / r;
    }
  };
  project_rows(raw_img, true, u, ru);
  project_rows(raw_txt, false, v, rv);

  const double inv_tau = std::exp(-head.log_tau());
  const auto st = detail::contrastive_forward(u, v, inv_tau);

  LossAndGradient out{st.loss, std::vector<double>(head.parameter_count(), 0.0)};
  const double scale = 0.5 / static_cast<double>(b);
  Matrix g(b, b);
  double dlog_tau = 0.0;
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j) {
      const double delta = (i == j) ? 2.0 : 0.0;
      g(i, j) = scale * (st.row_soft(i, j) + st.col_soft(i, j) - delta);
      dlog_tau -= g(i, j) * st.logits(i, j);
    }
  out.grad[head.log_tau_offset()] = dlog_tau;

  // dL/du_i = s * sum_j g_ij v_j ; dL/dv_j = s * sum_i g_ij u_i
  Matrix du(b, ds), dv(b, ds);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j) {
      const double w = inv_tau * g(i, j);
      auto dui = du.row(i);
      auto dvj = dv.row(j);
      const auto vj = v.row(j);
      const auto ui = u.row(i);
      for (std::size_t c = 0; c < ds; ++c) {
        dui[c] += w * vj[c];
        dvj[c] += w * ui[c];
      }
    }

  // Back through y / |y|, then through x W + b.
  auto backprop = [&](const Matrix& raw, const Matrix& unit, Matrix& dunit, const std::vector<double>& norms,
                      std::size_t w_off, std::size_t b_off) {
    const std::size_t d_in = raw.cols();
    std::vector<double> dy(ds);
    for (std::size_t i = 0; i < b; ++i) {
      const auto ui = unit.row(i);
      const auto dui = dunit.row(i);
      const double proj = dot(ui, dui);
      for (std::size_t c = 0; c < ds; ++c) dy[c] = (dui[c] - ui[c] * proj) / norms[i];
      for (std::size_t c = 0; c < ds; ++c) out.grad[b_off + c] += dy[c];
      const auto x = raw.row(i);
      for (std::size_t a = 0; a < d_in; ++a) {
        double* gw = out.grad.data() + w_off + a * ds;
        const double xa = x[a];
        for (std::size_t c = 0; c < ds; ++c) gw[c] += xa * dy[c];
      }
    }
  };
  backprop(raw_img, u, du, ru, head.w_img_offset(), head.b_img_offset());
  backprop(raw_txt, v, dv, rv, head.w_txt_offset(), head.b_txt_offset());
  return out;
}

/// Loss only, through the head (used for finite-difference checks and logging).
inline double info_nce_loss(const Matrix& raw_img, const Matrix& raw_txt, const ProjectionHead& head) {
  const std::size_t b = raw_img.rows();
  Matrix u(b, head.d_shared()), v(b, head.d_shared());
  for (std::size_t i = 0; i < b; ++i) {
    const auto pu = l2_normalize(head.project_img(raw_img.row(i)));
    const auto pv = l2_normalize(head.project_txt(raw_txt.row(i)));
    std::ranges::copy(pu, u.row(i).begin());
    std::ranges::copy(pv, v.row(i).begin());
  }
  return info_nce(u, v, head.tau());
}

/// Cosine-annealed learning rate: base at t = 0, zero at t = total.
inline double cosine_lr(double base, std::size_t t, std::size_t total) {
  if (total == 0) return base;
  const double frac = static_cast<double>(t) / static_cast<double>(total);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

struct AdamWConfig {
  double lr = 5e-5;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  AdamWConfig config;
  std::vector<double> m;
  std::vector<double> v;
  std::vector<double> decay;  // per-parameter weight-decay multiplier
  std::uint64_t steps = 0;

  OptimizerState() = default;
  OptimizerState(AdamWConfig cfg, std::size_t n, std::vector<double> decay_mask = {})
      : config(cfg), m(n, 0.0), v(n, 0.0), decay(std::move(decay_mask)) {
    if (decay.empty()) decay.assign(n, 1.0);
    if (decay.size() != n) throw ShapeError("decay mask length differs from parameter count");
  }
};

/// One AdamW update with decoupled weight decay at lr(t) = cosine_lr(base, t, total).
/// Returns the learning rate used.
inline double adamw_update(OptimizerState& st, std::span<double> params, std::span<const double> grads,
                           std::size_t t, std::size_t total) {
  if (params.size() != st.m.size() || grads.size() != params.size())
    throw ShapeError("optimizer state, parameters and gradients differ in length");
  const double lr = cosine_lr(st.config.lr, t, total);
  ++st.steps;
  const double k = static_cast<double>(st.steps);
  const double bc1 = 1.0 - std::pow(st.config.beta1, k);
  const double bc2 = 1.0 - std::pow(st.config.beta2, k);
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i] *= 1.0 - lr * st.config.weight_decay * st.decay[i];
    st.m[i] = st.config.beta1 * st.m[i] + (1.0 - st.config.beta1) * grads[i];
    st.v[i] = st.config.beta2 * st.v[i] + (1.0 - st.config.beta2) * grads[i] * grads[i];
    const double mhat = st.m[i] / bc1;
    const double vhat = st.v[i] / bc2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + st.config.eps);
  }
  return lr;
}

/// AdamW step on a projection head followed by the temperature clamp.
inline double optimizer_step(OptimizerState& st, ProjectionHead& head, std::span<const double> grads,
                             std::size_t t, std::size_t total) {
  if (total > 0 && t >= total) throw UsageError("optimizer step index must be below the schedule horizon");
  const double lr = adamw_update(st, head.params(), grads, t, total);
  head.clamp_tau();
  for (double p : head.params())
    if (!std::isfinite(p)) throw NumericalError("non-finite head parameter after optimizer step");
  return lr;
}

struct TrainerConfig {
  AdamWConfig adamw;
  std::size_t epochs = 20;
  std::size_t batch_size = 120;
  std::size_t d_shared = 512;
  double tau_init = 0.01;
  std::uint64_t seed = 0;
};

struct LossRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
};

inline void gather_batch(std::span<const EmbeddingPair* const> pairs, Matrix& img, Matrix& txt) {
  img = Matrix();
  txt = Matrix();
  for (const auto* p : pairs) {
    img.append_row(p->img);
    txt.append_row(p->txt);
  }
}

/// Owns a head, its optimizer state and the loss curve. Both the stand-alone
/// training loop and joint-mode curation drive it one batch at a time.
class Trainer {
 public:
  Trainer(ProjectionHead head, const TrainerConfig& cfg, std::size_t horizon)
      : head_(std::move(head)), state_(cfg.adamw, head_.parameter_count(), head_.decay_mask()), horizon_(horizon) {}

  const ProjectionHead& head() const noexcept { return head_; }
  ProjectionHead& head() noexcept { return head_; }
  const std::vector<LossRecord>& curve() const noexcept { return curve_; }
  std::size_t steps_taken() const noexcept { return t_; }
  std::size_t horizon() const noexcept { return horizon_; }

  /// Loss before the update is recorded.
  const LossRecord& step(std::span<const EmbeddingPair* const> batch, std::size_t epoch) {
    Matrix img, txt;
    gather_batch(batch, img, txt);
    const auto lg = info_nce_grad(img, txt, head_);
    const std::size_t t = std::min(t_, horizon_ > 0 ? horizon_ - 1 : 0);
    const double lr = optimizer_step(state_, head_, lg.grad, t, horizon_);
    curve_.push_back({t_, epoch, lr, lg.loss});
    ++t_;
    return curve_.back();
  }

 private:
  ProjectionHead head_;
  OptimizerState state_;
  std::size_t horizon_;
  std::size_t t_ = 0;
  std::vector<LossRecord> curve_;
};

inline std::size_t batches_per_epoch(std::size_t n, std::size_t batch_size) {
  if (batch_size < 2) throw UsageError("batch_size must be at least 2");
  const std::size_t full = n / batch_size;
  return full + ((n % batch_size) >= 2 ? 1 : 0);
}

/// Runs `epochs` passes over the samples in seeded-shuffled batches. A trailing
/// batch with a single pair is dropped (its loss is constant).
inline void run_epochs(Trainer& trainer, std::span<const EmbeddingPair* const> samples, std::size_t epochs,
                       std::size_t batch_size, std::size_t first_epoch, Rng& rng) {
  std::vector<const EmbeddingPair*> order(samples.begin(), samples.end());
  std::vector<const EmbeddingPair*> batch;
  for (std::size_t e = 0; e < epochs; ++e) {
    rng.shuffle(std::span<const EmbeddingPair*>(order));
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t end = std::min(order.size(), start + batch_size);
      if (end - start < 2) continue;
      batch.assign(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
      trainer.step(batch, first_epoch + e);
    }
  }
}

struct TrainResult {
  ProjectionHead head;
  std::vector<LossRecord> curve;
};

/// Trains a freshly initialized head on the given samples.
inline TrainResult train_head(std::span<const EmbeddingPair* const> samples, std::size_t d_img, std::size_t d_txt,
                              const TrainerConfig& cfg) {
  if (samples.empty()) throw UsageError("cannot train on an empty selection");
  if (cfg.epochs < 1) throw UsageError("epochs must be at least 1");
  const std::size_t horizon = cfg.epochs * batches_per_epoch(samples.size(), cfg.batch_size);
  Trainer trainer(ProjectionHead::random(d_img, d_txt, cfg.d_shared, cfg.tau_init, cfg.seed), cfg, horizon);
  Rng rng(cfg.seed ^ 0x9E3779B97F4A7C15ull);
  run_epochs(trainer, samples, cfg.epochs, cfg.batch_size, 0, rng);
  return {trainer.head(), trainer.curve()};
}

inline std::string loss_curve_csv(std::span<const LossRecord> curve) {
  std::string out = "step,epoch,lr,loss\n";
  char buf[128];
  for (const auto& r : curve) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g,%.9g\n", r.step, r.epoch, r.lr, r.loss);
    out += buf;
  }
  return out;
}

inline constexpr std::string_view kHeadMagic = "XFICHEAD";

/// Magic, d_img/d_txt/d_shared as u32 LE, then every parameter as f64 LE in layout order.
inline Bytes encode_head(const ProjectionHead& head) {
  ByteWriter w;
  w.magic(kHeadMagic);
  w.u32(static_cast<std::uint32_t>(head.d_img()));
  w.u32(static_cast<std::uint32_t>(head.d_txt()));
  w.u32(static_cast<std::uint32_t>(head.d_shared()));
  for (double p : head.params()) w.f64(p);
  return std::move(w).bytes();
}

inline ProjectionHead decode_head(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic(kHeadMagic, "head checkpoint");
  const std::uint32_t di = r.u32("d_img"), dt = r.u32("d_txt"), ds = r.u32("d_shared");
  if (di < 1 || dt < 1 || ds < 1) throw FormatError("head checkpoint: dimensions must be positive");
  const std::uint64_t n = (std::uint64_t{di} + 1 + dt + 1) * ds + 1;
  if (bytes.size() != 20 + n * 8)
    throw FormatError("head checkpoint: length " + std::to_string(bytes.size()) + " inconsistent with dims");
  ProjectionHead h(di, dt, ds);
  for (double& p : h.params()) p = r.f64("parameter");
  r.expect_end("head checkpoint");
  for (double p : h.params())
    if (!std::isfinite(p)) throw FormatError("head checkpoint: non-finite parameter");
  return h;
}

inline void save_head(const std::filesystem::path& path, const ProjectionHead& head) {
  write_file(path, encode_head(head));
}

inline ProjectionHead load_head(const std::filesystem::path& path) { return decode_head(read_file(path)); }

}  // namespace xfic
