#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "xfic/binary_io.hpp"
#include "xfic/error.hpp"
#include "xfic/matrix.hpp"
#include "xfic/rng.hpp"

namespace xfic {

struct TransportPlan;

/// K evolving centroids in the curation space.
///
/// A default-constructed bank is uninitialized; any distance query against it
/// raises StateError. Banks produced by init_kmeans, load_prototypes or the
/// explicit constructor are warmed up.
class PrototypeBank {
 public:
  PrototypeBank() = default;

  PrototypeBank(Matrix prototypes, double ema_alpha, std::uint64_t update_count = 0)
      : protos_(std::move(prototypes)), ema_alpha_(ema_alpha), warmup_done_(true),
        update_count_(update_count) {
    if (protos_.rows() < 1) throw UsageError("prototype bank needs at least one prototype");
    if (!(ema_alpha_ >= 0.0 && ema_alpha_ <= 1.0)) throw UsageError("ema_alpha must lie in [0, 1]");
    for (double v : protos_.data())
      if (!std::isfinite(v)) throw NumericalError("non-finite prototype entry");
  }

  std::size_t size() const noexcept { return protos_.rows(); }
  std::size_t dim() const noexcept { return protos_.cols(); }
  const Matrix& prototypes() const noexcept { return protos_; }
  std::span<const double> prototype(std::size_t k) const { return protos_.row(k); }
  double ema_alpha() const noexcept { return ema_alpha_; }
  bool warmed_up() const noexcept { return warmup_done_; }
  std::uint64_t update_count() const noexcept { return update_count_; }

  void require_ready() const {
    if (!warmup_done_ || protos_.empty()) throw StateError("prototype bank is not initialized");
  }

  friend bool operator==(const PrototypeBank&, const PrototypeBank&) = default;

 private:
  friend PrototypeBank update_prototypes(const TransportPlan&, const Matrix&,
                                         const PrototypeBank&, std::vector<std::size_t>*);

  Matrix protos_;
  double ema_alpha_ = 0.1;
  bool warmup_done_ = false;
  std::uint64_t update_count_ = 0;
};

struct NearestPrototype {
  std::size_t index = 0;
  double distance = 0.0;
};

/// Closest prototype by Euclidean distance, ties to the smallest index.
inline NearestPrototype nearest_prototype(std::span<const double> z, const PrototypeBank& bank) {
  bank.require_ready();
  if (z.size() != bank.dim()) throw ShapeError("embedding and prototype dimensions differ");
  NearestPrototype best{0, std::numeric_limits<double>::infinity()};
  double best_sq = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < bank.size(); ++k) {
    const double sq = squared_distance(z, bank.prototype(k));
    if (sq < best_sq) {
      best_sq = sq;
      best.index = k;
    }
  }
  best.distance = std::sqrt(best_sq);
  return best;
}

namespace detail {

inline std::size_t nearest_row(std::span<const double> z, const Matrix& centers, double* sq_out) {
  std::size_t best = 0;
  double best_sq = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < centers.rows(); ++k) {
    const double sq = squared_distance(z, centers.row(k));
    if (sq < best_sq) {
      best_sq = sq;
      best = k;
    }
  }
  if (sq_out) *sq_out = best_sq;
  return best;
}

}  // namespace detail

/// Lloyd's k-means from K seeded distinct starting samples.
///
/// Stops when assignments no longer change or after max_iters rounds. A cluster
/// that empties is re-seeded at the sample farthest from its own centroid
/// (ties to the smallest index, each sample used at most once per round).
inline Matrix kmeans_centroids(const Matrix& samples, std::size_t k, std::size_t max_iters,
                               std::uint64_t seed) {
  const std::size_t n = samples.rows();
  if (k < 1) throw UsageError("k-means needs K >= 1");
  if (n < k)
    throw InsufficientWarmupError("k-means needs at least K=" + std::to_string(k) + " samples, got " +
                                  std::to_string(n));
  Rng rng(seed);
  Matrix centers(k, samples.cols());
  const auto starts = rng.sample_without_replacement(n, k);
  for (std::size_t j = 0; j < k; ++j) std::ranges::copy(samples.row(starts[j]), centers.row(j).begin());

  std::vector<std::size_t> assign(n, std::numeric_limits<std::size_t>::max());
  std::vector<double> sq_to_center(n, 0.0);
  for (std::size_t iter = 0; iter < max_iters; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t a = detail::nearest_row(samples.row(i), centers, &sq_to_center[i]);
      if (a != assign[i]) {
        assign[i] = a;
        changed = true;
      }
    }
    if (!changed) break;

    Matrix sums(k, samples.cols());
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      auto dst = sums.row(assign[i]);
      const auto src = samples.row(i);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
      ++counts[assign[i]];
    }
    std::vector<bool> reseeded(n, false);
    for (std::size_t j = 0; j < k; ++j) {
      auto dst = centers.row(j);
      if (counts[j] > 0) {
        const auto s = sums.row(j);
        for (std::size_t c = 0; c < dst.size(); ++c) dst[c] = s[c] / static_cast<double>(counts[j]);
        continue;
      }
      std::size_t far = 0;
      double far_sq = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (!reseeded[i] && sq_to_center[i] > far_sq) {
          far_sq = sq_to_center[i];
          far = i;
        }
      }
      reseeded[far] = true;
      std::ranges::copy(samples.row(far), dst.begin());
    }
  }
  return centers;
}

/// Warm-up: prototypes initialized at k-means centroids of the given samples.
inline PrototypeBank init_kmeans(const Matrix& samples, std::size_t k, std::size_t max_iters,
                                 std::uint64_t seed, double ema_alpha) {
  if (k < 2) throw UsageError("prototype bank needs K >= 2");
  return PrototypeBank(kmeans_centroids(samples, k, max_iters, seed), ema_alpha);
}

/// Entropic transport plan between uniform sample and prototype marginals.
struct TransportPlan {
  Matrix plan;            // n x K, nonnegative
  double residual = 0.0;  // max absolute marginal violation of the returned plan
  std::size_t iterations = 0;
  bool converged = false;
};

struct SinkhornOptions {
  double epsilon = 0.05;
  std::size_t max_iters = 2000;
  double tol = 1e-6;
};

namespace detail {

inline double log_sum_exp(std::span<const double> v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

inline double marginal_residual(const Matrix& plan) {
  const std::size_t n = plan.rows(), k = plan.cols();
  const double row_target = 1.0 / static_cast<double>(n);
  const double col_target = 1.0 / static_cast<double>(k);
  std::vector<double> col(k, 0.0);
  double res = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double r = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      r += plan(i, j);
      col[j] += plan(i, j);
    }
    res = std::max(res, std::abs(r - row_target));
  }
  for (double c : col) res = std::max(res, std::abs(c - col_target));
  return res;
}

}  // namespace detail

/// Sinkhorn scaling in the log domain for an arbitrary n x K cost matrix.
///
/// Potentials f (rows) and g (columns) are updated alternately; the plan is
/// exp((f_i + g_k - C_ik) / epsilon). Working with potentials keeps small
/// epsilon (1e-3 against unit costs) free of underflow.
inline TransportPlan sinkhorn_from_cost(const Matrix& cost, const SinkhornOptions& opt) {
  const std::size_t n = cost.rows(), k = cost.cols();
  if (n < 1 || k < 1) throw ShapeError("sinkhorn needs a nonempty cost matrix");
  if (!(opt.epsilon > 0.0)) throw UsageError("sinkhorn epsilon must be positive");
  const double eps = opt.epsilon;
  const double log_a = -std::log(static_cast<double>(n));
  const double log_b = -std::log(static_cast<double>(k));

  std::vector<double> f(n, 0.0), g(k, 0.0);
  std::vector<double> row_buf(k), col_buf(n);
  TransportPlan out;
  out.plan = Matrix(n, k);

  auto fill_plan = [&] {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j) out.plan(i, j) = std::exp((f[i] + g[j] - cost(i, j)) / eps);
  };

  for (std::size_t it = 1; it <= opt.max_iters; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < k; ++j) row_buf[j] = (g[j] - cost(i, j)) / eps;
      f[i] = eps * (log_a - detail::log_sum_exp(row_buf));
    }
    for (std::size_t j = 0; j < k; ++j) {
      for (std::size_t i = 0; i < n; ++i) col_buf[i] = (f[i] - cost(i, j)) / eps;
      g[j] = eps * (log_b - detail::log_sum_exp(col_buf));
    }
    fill_plan();
    out.iterations = it;
    out.residual = detail::marginal_residual(out.plan);
    if (out.residual < opt.tol) {
      out.converged = true;
      break;
    }
  }
  if (opt.max_iters == 0) {
    fill_plan();
    out.residual = detail::marginal_residual(out.plan);
  }
  return out;
}

/// Sinkhorn plan with cost = squared Euclidean distance to each prototype.
inline TransportPlan sinkhorn_plan(const Matrix& embeddings, const PrototypeBank& bank,
                                   const SinkhornOptions& opt) {
  bank.require_ready();
  if (embeddings.cols() != bank.dim()) throw ShapeError("embedding and prototype dimensions differ");
  Matrix cost(embeddings.rows(), bank.size());
  for (std::size_t i = 0; i < embeddings.rows(); ++i)
    for (std::size_t j = 0; j < bank.size(); ++j)
      cost(i, j) = squared_distance(embeddings.row(i), bank.prototype(j));
  return sinkhorn_from_cost(cost, opt);
}

/// Per-row argmax of the plan, ties to the smallest column.
inline std::vector<std::size_t> hard_assignments(const TransportPlan& tp) {
  std::vector<std::size_t> out(tp.plan.rows(), 0);
  for (std::size_t i = 0; i < tp.plan.rows(); ++i) {
    double best = -1.0;
    for (std::size_t j = 0; j < tp.plan.cols(); ++j) {
      if (tp.plan(i, j) > best) {
        best = tp.plan(i, j);
        out[i] = j;
      }
    }
  }
  return out;
}

/// Plan-weighted recomputation of every prototype, blended in by EMA:
/// p_k <- (1 - alpha) p_k + alpha * (sum_i plan_ik z_i / sum_i plan_ik).
///
/// Columns with zero mass keep their prototype; their indices are appended to
/// `skipped` when provided.
inline PrototypeBank update_prototypes(const TransportPlan& tp, const Matrix& embeddings,
                                       const PrototypeBank& bank,
                                       std::vector<std::size_t>* skipped = nullptr) {
  bank.require_ready();
  if (tp.plan.rows() != embeddings.rows() || tp.plan.cols() != bank.size())
    throw ShapeError("transport plan does not match embeddings x prototypes");
  if (embeddings.cols() != bank.dim()) throw ShapeError("embedding and prototype dimensions differ");
  PrototypeBank next = bank;
  const double alpha = bank.ema_alpha();
  std::vector<double> candidate(bank.dim());
  for (std::size_t k = 0; k < bank.size(); ++k) {
    double mass = 0.0;
    std::ranges::fill(candidate, 0.0);
    for (std::size_t i = 0; i < embeddings.rows(); ++i) {
      const double w = tp.plan(i, k);
      mass += w;
      const auto z = embeddings.row(i);
      for (std::size_t c = 0; c < candidate.size(); ++c) candidate[c] += w * z[c];
    }
    if (!(mass > 0.0)) {
      if (skipped) skipped->push_back(k);
      continue;
    }
    auto p = next.protos_.row(k);
    for (std::size_t c = 0; c < p.size(); ++c) p[c] = (1.0 - alpha) * p[c] + alpha * (candidate[c] / mass);
  }
  ++next.update_count_;
  return next;
}

inline constexpr std::string_view kPrototypeMagic = "XFICPRO1";

inline Bytes encode_prototypes(const PrototypeBank& bank) {
  bank.require_ready();
  ByteWriter w;
  w.magic(kPrototypeMagic);
  w.u32(static_cast<std::uint32_t>(bank.size()));
  w.u32(static_cast<std::uint32_t>(bank.dim()));
  for (double v : bank.prototypes().data()) w.f64(v);
  w.f64(bank.ema_alpha());
  w.u64(bank.update_count());
  return std::move(w).bytes();
}

inline PrototypeBank decode_prototypes(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic(kPrototypeMagic, "prototype checkpoint");
  const std::uint32_t k = r.u32("K");
  const std::uint32_t dim = r.u32("dim");
  if (k < 1 || dim < 1) throw FormatError("prototype checkpoint: K and dim must be positive");
  const std::size_t expected = 8 + 4 + 4 + static_cast<std::size_t>(k) * dim * 8 + 8 + 8;
  if (bytes.size() != expected)
    throw FormatError("prototype checkpoint: length " + std::to_string(bytes.size()) +
                      " inconsistent with K=" + std::to_string(k) + ", dim=" + std::to_string(dim));
  Matrix protos(k, dim);
  for (double& v : protos.data()) v = r.f64("prototype entry");
  const double alpha = r.f64("ema_alpha");
  const std::uint64_t count = r.u64("update_count");
  r.expect_end("prototype checkpoint");
  return PrototypeBank(std::move(protos), alpha, count);
}

inline void save_prototypes(const std::filesystem::path& path, const PrototypeBank& bank) {
  write_file(path, encode_prototypes(bank));
}

inline PrototypeBank load_prototypes(const std::filesystem::path& path) {
  return decode_prototypes(read_file(path));
}

}  // namespace xfic
