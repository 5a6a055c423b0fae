#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "xfic/binary_io.hpp"
#include "xfic/curation.hpp"
#include "xfic/error.hpp"
#include "xfic/synth.hpp"
#include "xfic/trainer.hpp"

namespace xfic {

struct AnalysisConfig {
  std::size_t knn_k = 20;
  double low_density_quantile = 0.25;
};

struct EngineConfig {
  std::uint64_t seed = 0;
  CurationConfig curation;
  TrainerConfig trainer;
  double zero_shot_tau = 0.0;  // 0 = use the head's learned temperature
  AnalysisConfig analysis;
  MixtureSpec synth;

  /// Copies the global seed into every component.
  void apply_seed(std::uint64_t s) {
    seed = s;
    curation.seed = s;
    trainer.seed = s;
    synth.seed = s;
  }

  void validate() const {
    curation.validate();
    if (trainer.epochs < 1) throw UsageError("config key 'epochs' must be at least 1");
    if (trainer.batch_size < 2) throw UsageError("config key 'batch_size' must be at least 2");
    if (trainer.d_shared < 1) throw UsageError("config key 'd_shared' must be at least 1");
    if (!(trainer.tau_init >= kTauMin && trainer.tau_init <= kTauMax))
      throw UsageError("config key 'tau_init' must lie in [0.001, 0.5]");
    if (!(trainer.adamw.lr > 0.0)) throw UsageError("config key 'lr' must be positive");
    if (!(trainer.adamw.weight_decay >= 0.0)) throw UsageError("config key 'weight_decay' must be nonnegative");
    if (!(trainer.adamw.beta1 >= 0.0 && trainer.adamw.beta1 < 1.0)) throw UsageError("config key 'beta1' must lie in [0, 1)");
    if (!(trainer.adamw.beta2 >= 0.0 && trainer.adamw.beta2 < 1.0)) throw UsageError("config key 'beta2' must lie in [0, 1)");
    if (!(trainer.adamw.eps > 0.0)) throw UsageError("config key 'adam_eps' must be positive");
    if (!(zero_shot_tau >= 0.0)) throw UsageError("config key 'zero_shot_tau' must be nonnegative");
    if (analysis.knn_k < 1) throw UsageError("config key 'knn_k' must be at least 1");
    if (!(analysis.low_density_quantile > 0.0 && analysis.low_density_quantile < 1.0))
      throw UsageError("config key 'low_density_quantile' must lie in (0, 1)");
    synth.validate();
  }
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

template <typename T>
T config_number(std::string_view key, std::string_view value) {
  T v{};
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || ptr != value.data() + value.size())
    throw UsageError("config key '" + std::string(key) + "': expected a number, got '" + std::string(value) + "'");
  if constexpr (std::is_floating_point_v<T>)
    if (!std::isfinite(v)) throw UsageError("config key '" + std::string(key) + "' must be finite");
  return v;
}

inline std::vector<double> config_list(std::string_view key, std::string_view value) {
  std::vector<double> out;
  for (auto part : split(value, ',')) out.push_back(config_number<double>(key, trim(part)));
  return out;
}

}  // namespace detail

/// Parses `key = value` lines (`#` starts a comment). Absent keys keep their
/// defaults; unknown or repeated keys are errors.
inline EngineConfig parse_config(std::string_view text) {
  EngineConfig cfg;
  bool weights_set = false;
  using Setter = std::function<void(std::string_view key, std::string_view value)>;
  auto size = [](std::size_t& dst) {
    return Setter([&dst](auto k, auto v) { dst = detail::config_number<std::size_t>(k, v); });
  };
  auto real = [](double& dst) { return Setter([&dst](auto k, auto v) { dst = detail::config_number<double>(k, v); }); };

  const std::map<std::string, Setter, std::less<>> setters = {
      {"seed", Setter([&](auto k, auto v) { cfg.apply_seed(detail::config_number<std::uint64_t>(k, v)); })},
      {"superbatch_size", size(cfg.curation.superbatch_size)},
      {"outlier_frac", real(cfg.curation.outlier_frac)},
      {"keep_frac", real(cfg.curation.keep_frac)},
      {"per_cluster_budget", size(cfg.curation.per_cluster_budget)},
      {"num_prototypes", size(cfg.curation.num_prototypes)},
      {"ema_alpha", real(cfg.curation.ema_alpha)},
      {"curation_space", Setter([&](auto k, auto v) {
         const auto s = parse_curation_space(v);
         if (!s) throw UsageError("config key '" + std::string(k) + "': expected image_only, text_only or concat");
         cfg.curation.space = *s;
       })},
      {"sinkhorn_epsilon", real(cfg.curation.sinkhorn.epsilon)},
      {"sinkhorn_max_iters", size(cfg.curation.sinkhorn.max_iters)},
      {"sinkhorn_tol", real(cfg.curation.sinkhorn.tol)},
      {"warmup_samples", size(cfg.curation.warmup_samples)},
      {"kmeans_max_iters", size(cfg.curation.kmeans_max_iters)},
      {"target_subset_size", size(cfg.curation.target_subset_size)},
      {"lr", real(cfg.trainer.adamw.lr)},
      {"weight_decay", real(cfg.trainer.adamw.weight_decay)},
      {"beta1", real(cfg.trainer.adamw.beta1)},
      {"beta2", real(cfg.trainer.adamw.beta2)},
      {"adam_eps", real(cfg.trainer.adamw.eps)},
      {"epochs", size(cfg.trainer.epochs)},
      {"batch_size", size(cfg.trainer.batch_size)},
      {"d_shared", size(cfg.trainer.d_shared)},
      {"tau_init", real(cfg.trainer.tau_init)},
      {"zero_shot_tau", real(cfg.zero_shot_tau)},
      {"knn_k", size(cfg.analysis.knn_k)},
      {"low_density_quantile", real(cfg.analysis.low_density_quantile)},
      {"n_samples", size(cfg.synth.n_samples)},
      {"holdout_samples", size(cfg.synth.holdout_samples)},
      {"clusters", Setter([&](auto k, auto v) {
         const auto c = detail::config_number<std::size_t>(k, v);
         if (c < 1) throw UsageError("config key 'clusters' must be at least 1");
         if (!weights_set) cfg.synth.weights.assign(c, 1.0 / static_cast<double>(c));
         if (cfg.synth.weights.size() != c)
           throw UsageError("config key 'clusters' disagrees with the length of 'cluster_weights'");
       })},
      {"cluster_weights", Setter([&](auto k, auto v) {
         cfg.synth.weights = detail::config_list(k, v);
         weights_set = true;
       })},
      {"cluster_scales", Setter([&](auto k, auto v) { cfg.synth.scales = detail::config_list(k, v); })},
      {"rho", real(cfg.synth.rho)},
      {"noise_scale", real(cfg.synth.noise_scale)},
      {"cluster_separation", real(cfg.synth.separation)},
      {"d_img", size(cfg.synth.d_img)},
      {"d_txt", size(cfg.synth.d_txt)},
  };

  // `clusters` is applied after `cluster_weights` regardless of line order.
  std::map<std::string, std::pair<std::string, std::size_t>, std::less<>> entries;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw UsageError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    const auto key = detail::trim(line.substr(0, eq));
    const auto value = detail::trim(line.substr(eq + 1));
    if (!setters.contains(key)) throw UsageError("config: unknown key '" + std::string(key) + "'");
    if (value.empty()) throw UsageError("config key '" + std::string(key) + "' has no value");
    if (!entries.emplace(std::string(key), std::pair{std::string(value), line_no}).second)
      throw UsageError("config: duplicate key '" + std::string(key) + "'");
  }
  for (std::string_view first : {"seed", "cluster_weights"})
    if (const auto it = entries.find(first); it != entries.end()) setters.find(first)->second(first, it->second.first);
  for (const auto& [key, value] : entries)
    if (key != "seed" && key != "cluster_weights") setters.find(key)->second(key, value.first);
  cfg.validate();
  return cfg;
}

inline EngineConfig load_config(const std::filesystem::path& path) { return parse_config(read_text_file(path)); }

}  // namespace xfic
