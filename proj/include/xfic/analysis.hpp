#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include "xfic/embedding_space.hpp"
#include "xfic/error.hpp"
#include "xfic/matrix.hpp"
#include "xfic/rng.hpp"

namespace xfic {

struct DensityProfile {
  std::vector<double> values;  // mean distance to the k nearest other points, per point
  std::size_t k = 0;           // effective k
  double mean = 0.0;
  double sd = 0.0;
};

namespace detail {

inline std::pair<double, double> mean_sd(std::span<const double> v) {
  if (v.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  if (v.size() < 2) return {m, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

}  // namespace detail

/// Exact k-nearest-neighbor mean distance for every point (self excluded).
/// Effective k is min(k, n - 1).
inline DensityProfile knn_mean_distance(const Matrix& points, std::size_t k) {
  const std::size_t n = points.rows();
  if (n < 2) throw UsageError("knn_mean_distance needs at least two points");
  if (k < 1) throw UsageError("knn_mean_distance needs k >= 1");
  k = std::min(k, n - 1);

  // Per-point max-heaps of the k smallest squared distances seen so far.
  std::vector<double> heaps(n * k, std::numeric_limits<double>::infinity());
  auto push = [&](std::size_t i, double d) {
    double* h = heaps.data() + i * k;
    if (d >= h[0]) return;
    std::pop_heap(h, h + k);
    h[k - 1] = d;
    std::push_heap(h, h + k);
  };
  for (std::size_t i = 0; i < n; ++i) {
    const auto pi = points.row(i);
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d = squared_distance(pi, points.row(j));
      push(i, d);
      push(j, d);
    }
  }

  DensityProfile out;
  out.k = k;
  out.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double* h = heaps.data() + i * k;
    std::sort(h, h + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::sqrt(h[j]);
    out.values[i] = s / static_cast<double>(k);
  }
  std::tie(out.mean, out.sd) = detail::mean_sd(out.values);
  return out;
}

/// Nearest-rank quantile: sorted[ceil(q * n) - 1], clamped to the valid range.
inline double nearest_rank_quantile(std::span<const double> values, double q) {
  if (values.empty()) throw UsageError("quantile of an empty list");
  std::vector<double> s(values.begin(), values.end());
  std::ranges::sort(s);
  const double r = std::ceil(q * static_cast<double>(s.size()) - 1e-9);
  const std::size_t idx = r < 1.0 ? 0 : std::min(s.size() - 1, static_cast<std::size_t>(r) - 1);
  return s[idx];
}

/// Fraction of subset values at or above the (1 - quantile) nearest-rank
/// quantile of the full profile, i.e. inside the full set's lowest-density tail.
inline double low_density_proportion(std::span<const double> subset, std::span<const double> full,
                                     double quantile = 0.25) {
  if (subset.empty()) throw UsageError("low_density_proportion: empty subset");
  if (!(quantile > 0.0 && quantile < 1.0)) throw UsageError("low_density_proportion: quantile must lie in (0, 1)");
  const double threshold = nearest_rank_quantile(full, 1.0 - quantile);
  std::size_t hits = 0;
  for (double v : subset) hits += (v >= threshold);
  return static_cast<double>(hits) / static_cast<double>(subset.size());
}

/// Regularized incomplete beta I_x(a, b) via Lentz's continued fraction.
inline double regularized_incomplete_beta(double x, double a, double b) {
  if (!(x >= 0.0 && x <= 1.0)) throw UsageError("incomplete beta argument outside [0, 1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  constexpr double kTol = 1e-10;
  constexpr double kTiny = 1e-300;
  constexpr int kMaxIter = 10000;
  auto cf = [&](double x_, double a_, double b_) {
    const double qab = a_ + b_, qap = a_ + 1.0, qam = a_ - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x_ / qap;
    if (std::abs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
      const double m2 = 2.0 * m;
      double aa = m * (b_ - m) * x_ / ((qam + m2) * (a_ + m2));
      d = 1.0 + aa * d;
      if (std::abs(d) < kTiny) d = kTiny;
      c = 1.0 + aa / c;
      if (std::abs(c) < kTiny) c = kTiny;
      d = 1.0 / d;
      h *= d * c;
      aa = -(a_ + m) * (qab + m) * x_ / ((a_ + m2) * (qap + m2));
      d = 1.0 + aa * d;
      if (std::abs(d) < kTiny) d = kTiny;
      c = 1.0 + aa / c;
      if (std::abs(c) < kTiny) c = kTiny;
      d = 1.0 / d;
      const double del = d * c;
      h *= del;
      if (std::abs(del - 1.0) < kTol * 1e-2) return h;
    }
    throw NumericalError("incomplete beta continued fraction did not converge");
  };
  const double log_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * cf(x, a, b) / a;
  return 1.0 - front * cf(1.0 - x, b, a) / b;
}

/// Two-sided p-value of Student's t with df degrees of freedom.
inline double student_t_two_sided_p(double t, double df) {
  if (!(df > 0.0)) throw UsageError("degrees of freedom must be positive");
  if (std::isnan(t)) throw NumericalError("t statistic is NaN");
  if (std::isinf(t)) return 0.0;
  const double x = df / (df + t * t);
  return std::clamp(regularized_incomplete_beta(x, 0.5 * df, 0.5), 0.0, 1.0);
}

struct TestResult {
  double statistic = 0.0;
  double df = 0.0;
  double p_value = 1.0;
  double mean_a = 0.0;
  double mean_b = 0.0;
  std::size_t n_a = 0;
  std::size_t n_b = 0;
};

/// Two-sided Welch t-test (unequal variances, Welch-Satterthwaite df).
///
/// With zero variance in both groups: equal means give t = 0, p = 1; unequal
/// means give t = +-inf, p = 0. df then falls back to n_a + n_b - 2.
inline TestResult welch_t(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw UsageError("welch_t needs at least two values per group");
  const auto [ma, sa] = detail::mean_sd(a);
  const auto [mb, sb] = detail::mean_sd(b);
  TestResult r;
  r.mean_a = ma;
  r.mean_b = mb;
  r.n_a = a.size();
  r.n_b = b.size();
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double va = sa * sa / na, vb = sb * sb / nb;
  const double se2 = va + vb;
  if (se2 == 0.0) {
    r.df = na + nb - 2.0;
    if (ma == mb) {
      r.statistic = 0.0;
      r.p_value = 1.0;
    } else {
      r.statistic = ma > mb ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
      r.p_value = 0.0;
    }
    return r;
  }
  r.statistic = (ma - mb) / std::sqrt(se2);
  r.df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
  r.p_value = student_t_two_sided_p(r.statistic, r.df);
  return r;
}

/// Two-sided paired t-test on index-aligned values (one-sample t on a - b).
/// All-zero differences give p = 1; constant nonzero differences give p = 0.
inline TestResult paired_t(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw UsageError("paired_t needs equally long lists");
  if (a.size() < 2) throw UsageError("paired_t needs at least two pairs");
  std::vector<double> diff(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) diff[i] = a[i] - b[i];
  const auto [md, sd] = detail::mean_sd(diff);
  TestResult r;
  r.mean_a = detail::mean_sd(a).first;
  r.mean_b = detail::mean_sd(b).first;
  r.n_a = r.n_b = a.size();
  const double n = static_cast<double>(a.size());
  r.df = n - 1.0;
  if (sd == 0.0) {
    if (md == 0.0) {
      r.statistic = 0.0;
      r.p_value = 1.0;
    } else {
      r.statistic = md > 0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
      r.p_value = 0.0;
    }
    return r;
  }
  r.statistic = md / (sd / std::sqrt(n));
  r.p_value = student_t_two_sided_p(r.statistic, r.df);
  return r;
}

struct RunSummary {
  double mean = 0.0;
  double sd = 0.0;
  double se = 0.0;
  double ci95_halfwidth = 0.0;
};

/// Mean with SE = sd / sqrt(n) and a 1.96 * SE confidence halfwidth.
inline RunSummary run_summary(std::span<const double> values) {
  if (values.size() < 2) throw UsageError("run_summary needs at least two values");
  const double n = static_cast<double>(values.size());
  RunSummary s;
  for (double v : values) s.mean += v;
  s.mean /= n;
  double ss = 0.0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  const double var = ss / (n - 1.0);
  s.sd = std::sqrt(var);
  s.se = std::sqrt(var / n);
  s.ci95_halfwidth = 1.96 * s.se;
  return s;
}

struct Pca2Result {
  Matrix projections;          // n x 2
  Matrix components;           // 2 x d, unit rows
  double variance[2] = {0, 0};   // eigenvalues of the covariance
  double explained[2] = {0, 0};  // fraction of total variance
};

namespace detail {

inline void sign_normalize(std::span<double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (std::abs(v[i]) > std::abs(v[best])) best = i;
  if (v[best] < 0)
    for (double& x : v) x = -x;
}

inline std::vector<double> mat_vec(const Matrix& m, std::span<const double> v) {
  std::vector<double> out(m.rows(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i) out[i] = dot(m.row(i), v);
  return out;
}

inline void orthogonalize(std::vector<double>& v, std::span<const double> against) {
  const double p = dot(v, against);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] -= p * against[i];
}

/// Dominant eigenvector of a symmetric PSD matrix by power iteration, kept
/// orthogonal to `against` when given. Returns an empty vector if the matrix
/// has no variance left in the allowed subspace.
inline std::vector<double> power_iteration(const Matrix& c, std::span<const double> against, double tol,
                                           double scale) {
  const std::size_t d = c.rows();
  Rng rng(0x5eed);
  std::vector<double> v(d);
  for (double& x : v) x = rng.normal();
  if (!against.empty()) orthogonalize(v, against);
  double nv = std::sqrt(dot(v, v));
  for (double& x : v) x /= nv;
  constexpr std::size_t kMaxIter = 200000;
  for (std::size_t it = 0; it < kMaxIter; ++it) {
    auto w = mat_vec(c, v);
    if (!against.empty()) orthogonalize(w, against);
    const double nw = std::sqrt(dot(w, w));
    if (nw <= 1e-14 * scale) return {};
    double change = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      w[i] /= nw;
      change += (w[i] - v[i]) * (w[i] - v[i]);
    }
    v = std::move(w);
    if (std::sqrt(change) < tol) return v;
  }
  return v;
}

}  // namespace detail

/// Top-two principal components by power iteration with deflation, followed
/// by an exact 2 x 2 Rayleigh-Ritz rotation inside the recovered plane.
/// Each component's largest-magnitude loading is positive.
inline Pca2Result pca2(const Matrix& points, double tol = 1e-8) {
  const std::size_t n = points.rows(), d = points.cols();
  if (n < 3) throw UsageError("pca2 needs at least three points");
  if (d < 2) throw UsageError("pca2 needs at least two dimensions");
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) mean[c] += points(i, c);
  for (double& m : mean) m /= static_cast<double>(n);
  Matrix centered(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) centered(i, c) = points(i, c) - mean[c];
  Matrix cov(d, d);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = centered.row(i);
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = a; b < d; ++b) cov(a, b) += r[a] * r[b];
  }
  double trace = 0.0;
  for (std::size_t a = 0; a < d; ++a) {
    for (std::size_t b = a; b < d; ++b) {
      cov(a, b) /= static_cast<double>(n - 1);
      cov(b, a) = cov(a, b);
    }
    trace += cov(a, a);
  }
  if (!(trace > 0.0)) throw NumericalError("degenerate data: zero total variance");

  auto v1 = detail::power_iteration(cov, {}, tol, trace);
  if (v1.empty()) throw NumericalError("degenerate data: zero total variance");
  const double l1 = dot(v1, detail::mat_vec(cov, v1));
  Matrix deflated = cov;
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = 0; b < d; ++b) deflated(a, b) -= l1 * v1[a] * v1[b];
  auto v2 = detail::power_iteration(deflated, v1, tol, trace);
  if (v2.empty()) {
    // No variance beyond PC1: any unit vector orthogonal to it will do.
    v2.assign(d, 0.0);
    std::size_t pick = 0;
    for (std::size_t i = 1; i < d; ++i)
      if (std::abs(v1[i]) < std::abs(v1[pick])) pick = i;
    v2[pick] = 1.0;
    detail::orthogonalize(v2, v1);
    const double nv = std::sqrt(dot(v2, v2));
    for (double& x : v2) x /= nv;
  }

  // Rayleigh-Ritz on span{v1, v2}.
  const auto c1 = detail::mat_vec(cov, v1);
  const auto c2 = detail::mat_vec(cov, v2);
  const double a11 = dot(v1, c1), a12 = dot(v1, c2), a22 = dot(v2, c2);
  const double theta = 0.5 * std::atan2(2.0 * a12, a11 - a22);
  const double cs = std::cos(theta), sn = std::sin(theta);
  std::vector<double> e1(d), e2(d);
  for (std::size_t i = 0; i < d; ++i) {
    e1[i] = cs * v1[i] + sn * v2[i];
    e2[i] = -sn * v1[i] + cs * v2[i];
  }
  double lam1 = cs * cs * a11 + 2 * cs * sn * a12 + sn * sn * a22;
  double lam2 = sn * sn * a11 - 2 * cs * sn * a12 + cs * cs * a22;
  if (lam2 > lam1) {
    std::swap(e1, e2);
    std::swap(lam1, lam2);
  }
  detail::sign_normalize(e1);
  detail::sign_normalize(e2);

  Pca2Result out;
  out.components = Matrix(2, d);
  std::ranges::copy(e1, out.components.row(0).begin());
  std::ranges::copy(e2, out.components.row(1).begin());
  out.variance[0] = std::max(lam1, 0.0);
  out.variance[1] = std::max(lam2, 0.0);
  out.explained[0] = out.variance[0] / trace;
  out.explained[1] = out.variance[1] / trace;
  out.projections = Matrix(n, 2);
  for (std::size_t i = 0; i < n; ++i) {
    out.projections(i, 0) = dot(centered.row(i), e1);
    out.projections(i, 1) = dot(centered.row(i), e2);
  }
  return out;
}

/// Right-continuous empirical CDF: (value, fraction <= value) per distinct value.
inline std::vector<std::pair<double, double>> ecdf(std::span<const double> values) {
  if (values.empty()) throw UsageError("ecdf of an empty list");
  std::vector<double> s(values.begin(), values.end());
  std::ranges::sort(s);
  std::vector<std::pair<double, double>> out;
  const double n = static_cast<double>(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i + 1 < s.size() && s[i + 1] == s[i]) continue;
    out.emplace_back(s[i], static_cast<double>(i + 1) / n);
  }
  return out;
}

struct LabelHistogram {
  std::vector<std::size_t> counts;
  std::vector<double> fractions;  // count / number of samples
  std::size_t n_samples = 0;
};

/// Per-class label counts over the given samples (multi-label rows count once per set bit).
inline LabelHistogram label_histogram(std::span<const EmbeddingPair* const> samples, std::size_t n_labels) {
  if (n_labels == 0) throw UsageError("label histogram needs a labeled corpus");
  LabelHistogram h;
  h.counts.assign(n_labels, 0);
  h.n_samples = samples.size();
  for (const auto* s : samples)
    for (std::size_t c = 0; c < n_labels; ++c) h.counts[c] += s->has_label(c);
  h.fractions.resize(n_labels, 0.0);
  if (h.n_samples > 0)
    for (std::size_t c = 0; c < n_labels; ++c)
      h.fractions[c] = static_cast<double>(h.counts[c]) / static_cast<double>(h.n_samples);
  return h;
}

/// subset fraction minus full fraction, per class.
inline std::vector<double> label_deltas(const LabelHistogram& full, const LabelHistogram& subset) {
  if (full.counts.size() != subset.counts.size()) throw ShapeError("label histograms differ in class count");
  std::vector<double> d(full.counts.size());
  for (std::size_t c = 0; c < d.size(); ++c) d[c] = subset.fractions[c] - full.fractions[c];
  return d;
}

}  // namespace xfic
