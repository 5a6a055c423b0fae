#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "xfic/corpus.hpp"
#include "xfic/embedding_space.hpp"
#include "xfic/error.hpp"
#include "xfic/metrics.hpp"
#include "xfic/rng.hpp"

namespace xfic {

/// Long-tailed Gaussian mixture of paired embeddings.
///
/// Cluster means are drawn as N(0, separation^2 / d_img) per coordinate. An
/// image vector is its cluster mean plus N(0, (noise_scale * scale_c)^2)
/// noise; the paired text vector is rho * A x + (1 - rho) * noise_scale * g
/// with g standard normal. A copies the first min(d_img, d_txt) coordinates
/// and zero-pads the rest, so with d_img == d_txt it is the identity.
struct MixtureSpec {
  std::vector<double> weights{0.70, 0.15, 0.07, 0.04, 0.025, 0.015};
  std::vector<double> scales;  // per-cluster noise multiplier; empty = all 1
  double rho = 0.9;
  double noise_scale = 0.2;
  double separation = 1.0;
  std::size_t n_samples = 20000;
  std::size_t holdout_samples = 2000;
  std::size_t d_img = 32;
  std::size_t d_txt = 32;
  std::uint64_t seed = 0;

  std::size_t clusters() const noexcept { return weights.size(); }
  double scale(std::size_t c) const { return scales.empty() ? 1.0 : scales[c]; }

  void validate() const {
    if (weights.empty()) throw UsageError("mixture needs at least one cluster");
    double sum = 0.0;
    for (double w : weights) {
      if (!(w > 0.0)) throw UsageError("cluster_weights must be positive");
      sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw UsageError("cluster_weights must sum to 1");
    if (!scales.empty()) {
      if (scales.size() != weights.size()) throw UsageError("cluster_scales must list one value per cluster");
      for (double s : scales)
        if (!(s > 0.0)) throw UsageError("cluster_scales must be positive");
    }
    if (!(rho >= 0.0 && rho <= 1.0)) throw UsageError("rho must lie in [0, 1]");
    if (!(noise_scale >= 0.0) || !std::isfinite(noise_scale)) throw UsageError("noise_scale must be nonnegative");
    if (!(separation > 0.0) || !std::isfinite(separation)) throw UsageError("cluster_separation must be positive");
    if (d_img < 2 || d_txt < 2) throw UsageError("d_img and d_txt must be at least 2");
    if (weights.size() > UINT32_MAX || n_samples + holdout_samples > UINT32_MAX)
      throw UsageError("mixture too large for the corpus format");
  }
};

struct SynthOutput {
  Corpus corpus;
  Corpus holdout;
  Matrix means;  // C x d_img
  std::vector<std::size_t> cluster_counts;
  std::vector<std::size_t> holdout_counts;
};

namespace detail {

inline std::vector<double> align_to_text(std::span<const double> x, std::size_t d_txt) {
  std::vector<double> out(d_txt, 0.0);
  std::copy_n(x.begin(), std::min(x.size(), d_txt), out.begin());
  return out;
}

inline std::size_t draw_cluster(Rng& rng, std::span<const double> cumulative) {
  const double u = rng.uniform();
  for (std::size_t c = 0; c + 1 < cumulative.size(); ++c)
    if (u < cumulative[c]) return c;
  return cumulative.size() - 1;
}

}  // namespace detail

inline Matrix mixture_means(const MixtureSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  Matrix means(spec.clusters(), spec.d_img);
  const double s = spec.separation / std::sqrt(static_cast<double>(spec.d_img));
  for (std::size_t c = 0; c < spec.clusters(); ++c)
    for (std::size_t j = 0; j < spec.d_img; ++j) means(c, j) = s * rng.normal();
  return means;
}

/// Draws the corpus and then the holdout split from one continued stream.
/// Ids are consecutive: 0..n-1 for the corpus, n.. for the holdout.
inline SynthOutput generate_corpus(const MixtureSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  SynthOutput out;
  out.means = Matrix(spec.clusters(), spec.d_img);
  const double s = spec.separation / std::sqrt(static_cast<double>(spec.d_img));
  for (std::size_t c = 0; c < spec.clusters(); ++c)
    for (std::size_t j = 0; j < spec.d_img; ++j) out.means(c, j) = s * rng.normal();

  std::vector<double> cumulative(spec.clusters());
  double acc = 0.0;
  for (std::size_t c = 0; c < spec.clusters(); ++c) cumulative[c] = (acc += spec.weights[c]);

  const auto n_labels = static_cast<std::uint32_t>(spec.clusters());
  auto fill = [&](Corpus& corpus, std::vector<std::size_t>& counts, std::size_t n, std::uint64_t first_id) {
    corpus.d_img = static_cast<std::uint32_t>(spec.d_img);
    corpus.d_txt = static_cast<std::uint32_t>(spec.d_txt);
    corpus.n_labels = n_labels;
    corpus.records.reserve(n);
    counts.assign(spec.clusters(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = detail::draw_cluster(rng, cumulative);
      ++counts[c];
      EmbeddingPair p;
      p.id = first_id + i;
      p.img.resize(spec.d_img);
      const double sigma = spec.noise_scale * spec.scale(c);
      for (std::size_t j = 0; j < spec.d_img; ++j) p.img[j] = out.means(c, j) + sigma * rng.normal();
      p.txt = detail::align_to_text(p.img, spec.d_txt);
      for (double& v : p.txt) v = spec.rho * v + (1.0 - spec.rho) * spec.noise_scale * rng.normal();
      // Storage is f32; round here so in-memory and on-disk corpora agree.
      for (double& v : p.img) v = static_cast<float>(v);
      for (double& v : p.txt) v = static_cast<float>(v);
      p.labels.assign(corpus.label_bytes(), 0);
      p.labels[c / 8] = static_cast<std::uint8_t>(1u << (c % 8));
      corpus.records.push_back(std::move(p));
    }
  };
  fill(out.corpus, out.cluster_counts, spec.n_samples, 0);
  fill(out.holdout, out.holdout_counts, spec.holdout_samples, spec.n_samples);
  return out;
}

/// Per class: positive = normalized text-side image of the cluster mean,
/// negative = normalized mean of the other classes' positives.
inline std::vector<PromptPair> generate_prompts(const MixtureSpec& spec) {
  const Matrix means = mixture_means(spec);
  const std::size_t c_count = spec.clusters();
  std::vector<std::vector<double>> pos(c_count);
  for (std::size_t c = 0; c < c_count; ++c) pos[c] = l2_normalize(detail::align_to_text(means.row(c), spec.d_txt));
  std::vector<PromptPair> out;
  for (std::size_t c = 0; c < c_count; ++c) {
    PromptPair p;
    p.name = "class_" + std::to_string(c);
    p.positive = pos[c];
    if (c_count == 1) {
      // No other class to contrast with: use the opposite direction.
      p.negative = pos[c];
      for (double& v : p.negative) v = -v;
    } else {
      std::vector<double> neg(spec.d_txt, 0.0);
      for (std::size_t o = 0; o < c_count; ++o)
        if (o != c)
          for (std::size_t j = 0; j < spec.d_txt; ++j) neg[j] += pos[o][j];
      for (double& v : neg) v /= static_cast<double>(c_count - 1);
      p.negative = l2_normalize(neg);
    }
    out.push_back(std::move(p));
  }
  return out;
}

inline nlohmann::ordered_json manifest_json(const MixtureSpec& spec, const SynthOutput& out) {
  nlohmann::ordered_json j;
  j["seed"] = spec.seed;
  j["n_samples"] = spec.n_samples;
  j["holdout_samples"] = spec.holdout_samples;
  j["d_img"] = spec.d_img;
  j["d_txt"] = spec.d_txt;
  j["clusters"] = spec.clusters();
  j["cluster_weights"] = spec.weights;
  std::vector<double> scales(spec.clusters());
  for (std::size_t c = 0; c < scales.size(); ++c) scales[c] = spec.scale(c);
  j["cluster_scales"] = scales;
  j["rho"] = spec.rho;
  j["noise_scale"] = spec.noise_scale;
  j["cluster_separation"] = spec.separation;
  j["cluster_counts"] = out.cluster_counts;
  j["holdout_counts"] = out.holdout_counts;
  return j;
}

}  // namespace xfic
