#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "json.hpp"
#include "xfic/corpus.hpp"
#include "xfic/embedding_space.hpp"
#include "xfic/error.hpp"
#include "xfic/matrix.hpp"
#include "xfic/prototype_bank.hpp"
#include "xfic/rng.hpp"
#include "xfic/trainer.hpp"

namespace xfic {

struct CurationConfig {
  std::size_t superbatch_size = 640;
  double outlier_frac = 0.05;
  double keep_frac = 0.10;
  std::size_t per_cluster_budget = 10;
  std::size_t num_prototypes = 6;
  double ema_alpha = 0.1;
  CurationSpace space = CurationSpace::Concat;
  std::uint64_t seed = 0;
  SinkhornOptions sinkhorn;
  std::size_t warmup_samples = 6400;
  std::size_t kmeans_max_iters = 100;
  std::size_t target_subset_size = 0;  // 0 = no cap

  void validate() const {
    if (!(outlier_frac >= 0.0 && outlier_frac < 1.0)) throw UsageError("outlier_frac must lie in [0, 1)");
    if (!(keep_frac > 0.0 && keep_frac < 1.0)) throw UsageError("keep_frac must lie in (0, 1)");
    if (!(outlier_frac + keep_frac < 1.0)) throw UsageError("outlier_frac + keep_frac must be below 1");
    if (per_cluster_budget < 1) throw UsageError("per_cluster_budget must be at least 1");
    if (num_prototypes < 2) throw UsageError("K must be at least 2");
    if (superbatch_size < num_prototypes) throw UsageError("superbatch_size must be at least K");
    if (!(ema_alpha >= 0.0 && ema_alpha <= 1.0)) throw UsageError("ema_alpha must lie in [0, 1]");
    if (!(sinkhorn.epsilon > 0.0)) throw UsageError("sinkhorn_epsilon must be positive");
    if (sinkhorn.max_iters < 1) throw UsageError("sinkhorn_max_iters must be at least 1");
    if (!(sinkhorn.tol > 0.0)) throw UsageError("sinkhorn_tol must be positive");
    if (warmup_samples < num_prototypes) throw UsageError("warmup_samples must be at least K");
  }
};

/// floor(frac * m), robust to products like 0.29 * 100 landing a hair below an integer.
inline std::size_t fraction_count(double frac, std::size_t m) {
  const double x = frac * static_cast<double>(m);
  return static_cast<std::size_t>(std::floor(x + 1e-9 * std::max(1.0, x)));
}

struct ScoredSample {
  std::uint64_t id = 0;
  std::size_t nearest = 0;
  double distance = 0.0;
  std::size_t row = 0;  // position in the super-batch

  friend bool operator==(const ScoredSample&, const ScoredSample&) = default;
};

/// Distance of every super-batch row to its nearest prototype.
inline std::vector<ScoredSample> score_superbatch(const Matrix& batch, std::span<const std::uint64_t> ids,
                                                  const PrototypeBank& bank) {
  bank.require_ready();
  if (batch.rows() != ids.size()) throw ShapeError("score_superbatch: ids and rows differ in count");
  std::vector<ScoredSample> out;
  out.reserve(batch.rows());
  for (std::size_t i = 0; i < batch.rows(); ++i) {
    const auto np = nearest_prototype(batch.row(i), bank);
    out.push_back({ids[i], np.index, np.distance, i});
  }
  return out;
}

struct TrimResult {
  std::vector<ScoredSample> kept;  // input order
  std::vector<std::uint64_t> trimmed;
};

/// Drops floor(frac * m) samples with the largest distances; among equal
/// distances the larger id goes first.
inline TrimResult trim_outliers(std::span<const ScoredSample> scored, double outlier_frac) {
  const std::size_t drop = fraction_count(outlier_frac, scored.size());
  std::vector<std::size_t> order(scored.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::ranges::sort(order, [&](std::size_t a, std::size_t b) {
    if (scored[a].distance != scored[b].distance) return scored[a].distance > scored[b].distance;
    return scored[a].id > scored[b].id;
  });
  std::vector<bool> dropped(scored.size(), false);
  TrimResult out;
  for (std::size_t i = 0; i < drop; ++i) {
    dropped[order[i]] = true;
    out.trimmed.push_back(scored[order[i]].id);
  }
  for (std::size_t i = 0; i < scored.size(); ++i)
    if (!dropped[i]) out.kept.push_back(scored[i]);
  return out;
}

struct DistantSplit {
  std::vector<ScoredSample> distant;  // by distance descending, ties by ascending id
  std::vector<ScoredSample> pool;     // input order
};

/// Keeps floor(keep_frac * |kept|) farthest samples; everything else forms the pool.
inline DistantSplit select_distant(std::span<const ScoredSample> kept, double keep_frac) {
  const std::size_t take = fraction_count(keep_frac, kept.size());
  std::vector<std::size_t> order(kept.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::ranges::sort(order, [&](std::size_t a, std::size_t b) {
    if (kept[a].distance != kept[b].distance) return kept[a].distance > kept[b].distance;
    return kept[a].id < kept[b].id;
  });
  std::vector<bool> chosen(kept.size(), false);
  DistantSplit out;
  for (std::size_t i = 0; i < take; ++i) {
    chosen[order[i]] = true;
    out.distant.push_back(kept[order[i]]);
  }
  for (std::size_t i = 0; i < kept.size(); ++i)
    if (!chosen[i]) out.pool.push_back(kept[i]);
  return out;
}

/// Greedy max-min (farthest point) sampling of up to `budget` rows.
///
/// The first pick is the row farthest from `anchor`; every later pick
/// maximizes the minimum distance to rows already picked. The anchor itself
/// is not part of the picked set. Ties go to the smallest id. Returns ids in
/// pick order, or every id (input order) when the set fits the budget.
inline std::vector<std::uint64_t> fps_select(const Matrix& points, std::span<const std::uint64_t> ids,
                                             std::size_t budget, std::span<const double> anchor) {
  if (budget < 1) throw UsageError("fps budget must be at least 1");
  if (points.rows() != ids.size()) throw ShapeError("fps_select: ids and rows differ in count");
  const std::size_t n = points.rows();
  if (n <= budget) return {ids.begin(), ids.end()};
  if (anchor.size() != points.cols()) throw ShapeError("fps_select: anchor dimension mismatch");

  auto better = [&](double d, std::size_t i, double best_d, std::size_t best_i) {
    return d > best_d || (d == best_d && ids[i] < ids[best_i]);
  };

  std::vector<double> min_sq(n, std::numeric_limits<double>::infinity());
  std::vector<bool> taken(n, false);
  std::vector<std::uint64_t> out;
  out.reserve(budget);

  std::size_t pick = 0;
  double pick_d = -1.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = squared_distance(points.row(i), anchor);
    if (better(d, i, pick_d, pick)) {
      pick_d = d;
      pick = i;
    }
  }
  while (true) {
    taken[pick] = true;
    out.push_back(ids[pick]);
    if (out.size() == budget) break;
    const auto p = points.row(pick);
    std::size_t next = 0;
    double next_d = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      min_sq[i] = std::min(min_sq[i], squared_distance(points.row(i), p));
      if (next_d < 0.0 || better(min_sq[i], i, next_d, next)) {
        next_d = min_sq[i];
        next = i;
      }
    }
    pick = next;
  }
  return out;
}

enum class SelectionReason { Distant, Fps };

inline std::string_view to_string(SelectionReason r) { return r == SelectionReason::Distant ? "distant" : "fps"; }

struct SelectionEntry {
  std::uint64_t id = 0;
  std::size_t iteration = 0;
  SelectionReason reason = SelectionReason::Distant;
  std::size_t proto = 0;  // nearest prototype at scoring time
  double distance = 0.0;

  friend bool operator==(const SelectionEntry&, const SelectionEntry&) = default;
};

struct IterationStats {
  std::size_t iteration = 0;
  std::size_t superbatch = 0;
  std::size_t trimmed = 0;
  std::size_t distant = 0;
  std::size_t pool = 0;
  std::size_t fps = 0;
  std::size_t minibatch = 0;
  std::size_t recorded = 0;  // entries appended to the selection (differs only under a size cap)
  std::vector<std::size_t> pool_per_cluster;
  std::vector<std::size_t> fps_per_cluster;
  double mean_distance = 0.0;
  double min_distant_distance = 0.0;
  double max_pool_distance = 0.0;
  std::size_t assign_sinkhorn_iters = 0;
  double assign_residual = 0.0;
  std::size_t update_sinkhorn_iters = 0;
  double update_residual = 0.0;
};

/// Mini-batch picked from one super-batch: distant samples first (distance
/// descending), then FPS picks cluster by cluster.
struct MinibatchSelection {
  std::vector<SelectionEntry> entries;
  std::vector<std::size_t> rows;  // super-batch row of each entry
  IterationStats stats;
};

inline TransportPlan require_converged(TransportPlan tp, std::string_view what) {
  if (!tp.converged)
    throw NumericalError("sinkhorn did not converge during " + std::string(what) + " (residual " +
                         std::to_string(tp.residual) + " after " + std::to_string(tp.iterations) + " iterations)");
  return tp;
}

/// Score, trim, keep distant samples, cluster the pool by transport plan and
/// FPS-undersample every cluster. The bank is not modified.
inline MinibatchSelection select_minibatch(const Matrix& batch, std::span<const std::uint64_t> ids,
                                           const PrototypeBank& bank, const CurationConfig& cfg,
                                           std::size_t iteration) {
  bank.require_ready();
  MinibatchSelection out;
  auto& st = out.stats;
  st.iteration = iteration;
  st.superbatch = batch.rows();
  if (batch.rows() == 0) return out;

  const auto scored = score_superbatch(batch, ids, bank);
  for (const auto& s : scored) st.mean_distance += s.distance;
  st.mean_distance /= static_cast<double>(scored.size());

  const auto trim = trim_outliers(scored, cfg.outlier_frac);
  st.trimmed = trim.trimmed.size();
  const auto split = select_distant(trim.kept, cfg.keep_frac);
  st.distant = split.distant.size();
  st.pool = split.pool.size();
  st.min_distant_distance = split.distant.empty() ? 0.0 : split.distant.back().distance;
  for (const auto& p : split.pool) st.max_pool_distance = std::max(st.max_pool_distance, p.distance);

  for (const auto& d : split.distant) {
    out.entries.push_back({d.id, iteration, SelectionReason::Distant, d.nearest, d.distance});
    out.rows.push_back(d.row);
  }

  const std::size_t k = bank.size();
  st.pool_per_cluster.assign(k, 0);
  st.fps_per_cluster.assign(k, 0);
  if (!split.pool.empty()) {
    Matrix pool_z;
    for (const auto& p : split.pool) pool_z.append_row(batch.row(p.row));
    const auto tp = require_converged(sinkhorn_plan(pool_z, bank, cfg.sinkhorn), "pool assignment");
    st.assign_sinkhorn_iters = tp.iterations;
    st.assign_residual = tp.residual;
    const auto cluster = hard_assignments(tp);
    for (std::size_t c = 0; c < k; ++c) {
      Matrix members;
      std::vector<std::uint64_t> member_ids;
      std::vector<std::size_t> member_pool_index;
      for (std::size_t i = 0; i < split.pool.size(); ++i) {
        if (cluster[i] != c) continue;
        members.append_row(pool_z.row(i));
        member_ids.push_back(split.pool[i].id);
        member_pool_index.push_back(i);
      }
      st.pool_per_cluster[c] = member_ids.size();
      if (member_ids.empty()) continue;
      const auto picks = fps_select(members, member_ids, cfg.per_cluster_budget, bank.prototype(c));
      st.fps_per_cluster[c] = picks.size();
      for (auto id : picks) {
        const auto it = std::ranges::find(member_ids, id);
        const auto& s = split.pool[member_pool_index[static_cast<std::size_t>(it - member_ids.begin())]];
        out.entries.push_back({s.id, iteration, SelectionReason::Fps, s.nearest, s.distance});
        out.rows.push_back(s.row);
      }
    }
  }
  st.fps = out.entries.size() - st.distant;
  st.minibatch = out.entries.size();
  return out;
}

/// Plan-weighted prototype re-estimate from mini-batch embeddings, EMA-blended.
inline PrototypeBank update_from_minibatch(const Matrix& minibatch, const PrototypeBank& bank,
                                           const CurationConfig& cfg, IterationStats* stats = nullptr) {
  if (minibatch.rows() == 0) return bank;
  const auto tp = require_converged(sinkhorn_plan(minibatch, bank, cfg.sinkhorn), "prototype update");
  if (stats) {
    stats->update_sinkhorn_iters = tp.iterations;
    stats->update_residual = tp.residual;
  }
  return update_prototypes(tp, minibatch, bank);
}

struct SuperbatchResult {
  MinibatchSelection selection;
  PrototypeBank bank;
};

/// One full iteration in a fixed embedding space.
inline SuperbatchResult curate_superbatch(const Matrix& batch, std::span<const std::uint64_t> ids,
                                          const PrototypeBank& bank, const CurationConfig& cfg,
                                          std::size_t iteration = 1) {
  auto sel = select_minibatch(batch, ids, bank, cfg, iteration);
  Matrix mb;
  for (auto r : sel.rows) mb.append_row(batch.row(r));
  auto next = update_from_minibatch(mb, bank, cfg, &sel.stats);
  return {std::move(sel), std::move(next)};
}

struct CuratedSelection {
  std::vector<SelectionEntry> entries;
  std::vector<IterationStats> iterations;

  std::vector<std::uint64_t> ids() const {
    std::vector<std::uint64_t> out;
    out.reserve(entries.size());
    for (const auto& e : entries) out.push_back(e.id);
    return out;
  }
};

enum class RunMode { Frozen, Joint };

struct CurationResult {
  CuratedSelection selection;
  PrototypeBank bank;
};

/// Seeded visiting order of the corpus: warm-up samples first, then super-batches.
inline std::vector<std::size_t> stream_order(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  return rng.permutation(n);
}

/// One epoch of prototype-driven curation over the corpus.
///
/// The corpus is visited in a seeded shuffled order. The first warmup_samples
/// records initialize the prototypes by k-means; the rest are consumed as
/// consecutive super-batches (a trailing partial super-batch is curated when it
/// holds at least K samples). In joint mode every curation-space vector is
/// computed through the trainer's current head, the trainer takes one step on
/// each mini-batch, and prototypes are re-estimated from the mini-batch
/// re-embedded after that step.
inline CurationResult run_curation(const Corpus& corpus, const CurationConfig& cfg, RunMode mode,
                                   Trainer* trainer = nullptr) {
  cfg.validate();
  if (mode == RunMode::Joint && trainer == nullptr) throw UsageError("joint mode requires a projection head");
  if (corpus.size() < cfg.warmup_samples)
    throw InsufficientWarmupError("corpus has " + std::to_string(corpus.size()) + " samples, warmup_samples is " +
                                  std::to_string(cfg.warmup_samples));

  const auto order = stream_order(corpus.size(), cfg.seed);
  auto embed = [&](std::size_t record) {
    const auto& p = corpus.records[record];
    return mode == RunMode::Joint ? unify_projected(p, trainer->head(), cfg.space) : unify(p, cfg.space);
  };

  Matrix warm;
  for (std::size_t i = 0; i < cfg.warmup_samples; ++i) warm.append_row(embed(order[i]));
  CurationResult out;
  out.bank = init_kmeans(warm, cfg.num_prototypes, cfg.kmeans_max_iters, cfg.seed, cfg.ema_alpha);

  std::size_t pos = cfg.warmup_samples;
  std::size_t iteration = 0;
  const std::size_t cap = cfg.target_subset_size;
  while (pos < corpus.size()) {
    const std::size_t end = std::min(corpus.size(), pos + cfg.superbatch_size);
    if (end - pos < cfg.num_prototypes) break;
    ++iteration;
    Matrix batch;
    std::vector<std::uint64_t> ids;
    std::vector<std::size_t> records;
    for (std::size_t i = pos; i < end; ++i) {
      batch.append_row(embed(order[i]));
      ids.push_back(corpus.records[order[i]].id);
      records.push_back(order[i]);
    }
    pos = end;

    auto sel = select_minibatch(batch, ids, out.bank, cfg, iteration);
    Matrix mb;
    if (mode == RunMode::Joint) {
      std::vector<const EmbeddingPair*> pairs;
      for (auto r : sel.rows) pairs.push_back(&corpus.records[records[r]]);
      if (pairs.size() >= 2) trainer->step(pairs, 0);
      for (auto r : sel.rows) mb.append_row(embed(records[r]));
    } else {
      for (auto r : sel.rows) mb.append_row(batch.row(r));
    }
    out.bank = update_from_minibatch(mb, out.bank, cfg, &sel.stats);

    std::size_t room = sel.entries.size();
    if (cap > 0) room = std::min(room, cap - out.selection.entries.size());
    out.selection.entries.insert(out.selection.entries.end(), sel.entries.begin(),
                                 sel.entries.begin() + static_cast<std::ptrdiff_t>(room));
    sel.stats.recorded = room;
    out.selection.iterations.push_back(std::move(sel.stats));
    if (cap > 0 && out.selection.entries.size() >= cap) break;
  }
  return out;
}

/// Number of super-batch iterations one epoch will run (ignoring any size cap).
inline std::size_t planned_iterations(std::size_t corpus_size, const CurationConfig& cfg) {
  if (corpus_size <= cfg.warmup_samples) return 0;
  const std::size_t rest = corpus_size - cfg.warmup_samples;
  return rest / cfg.superbatch_size + ((rest % cfg.superbatch_size) >= cfg.num_prototypes ? 1 : 0);
}

inline std::string format_g9(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

/// CSV `id,iteration,reason,proto,distance`, rows in selection order.
inline std::string selection_csv(std::span<const SelectionEntry> entries) {
  std::string out = "id,iteration,reason,proto,distance\n";
  for (const auto& e : entries) {
    out += std::to_string(e.id);
    out += ',';
    out += std::to_string(e.iteration);
    out += ',';
    out += to_string(e.reason);
    out += ',';
    out += std::to_string(e.proto);
    out += ',';
    out += format_g9(e.distance);
    out += '\n';
  }
  return out;
}

namespace detail {

template <typename T>
T parse_number(std::string_view s, std::string_view what, std::size_t line) {
  T v{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw FormatError("selection file line " + std::to_string(line) + ": bad " + std::string(what) + " '" +
                      std::string(s) + "'");
  return v;
}

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto p = s.find(sep, start);
    if (p == std::string_view::npos) {
      out.push_back(s.substr(start));
      return out;
    }
    out.push_back(s.substr(start, p - start));
    start = p + 1;
  }
}

}  // namespace detail

inline std::vector<SelectionEntry> parse_selection_csv(std::string_view text) {
  std::vector<SelectionEntry> out;
  std::size_t line_no = 0;
  std::size_t start = 0;
  std::unordered_set<std::uint64_t> seen;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line_no == 1) {
      if (line != "id,iteration,reason,proto,distance")
        throw FormatError("selection file: unexpected header '" + std::string(line) + "'");
      continue;
    }
    if (line.empty()) continue;
    const auto f = detail::split(line, ',');
    if (f.size() != 5) throw FormatError("selection file line " + std::to_string(line_no) + ": expected 5 fields");
    SelectionEntry e;
    e.id = detail::parse_number<std::uint64_t>(f[0], "id", line_no);
    e.iteration = detail::parse_number<std::size_t>(f[1], "iteration", line_no);
    if (f[2] == "distant")
      e.reason = SelectionReason::Distant;
    else if (f[2] == "fps")
      e.reason = SelectionReason::Fps;
    else
      throw FormatError("selection file line " + std::to_string(line_no) + ": bad reason");
    e.proto = detail::parse_number<std::size_t>(f[3], "proto", line_no);
    e.distance = detail::parse_number<double>(f[4], "distance", line_no);
    if (!seen.insert(e.id).second)
      throw FormatError("selection file line " + std::to_string(line_no) + ": duplicate id");
    out.push_back(e);
  }
  if (line_no == 0) throw FormatError("selection file is empty");
  return out;
}

inline nlohmann::ordered_json iteration_stats_json(std::span<const IterationStats> stats) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& s : stats) {
    nlohmann::ordered_json j;
    j["iteration"] = s.iteration;
    j["superbatch"] = s.superbatch;
    j["trimmed"] = s.trimmed;
    j["distant"] = s.distant;
    j["pool"] = s.pool;
    j["fps"] = s.fps;
    j["minibatch"] = s.minibatch;
    j["recorded"] = s.recorded;
    j["pool_per_cluster"] = s.pool_per_cluster;
    j["fps_per_cluster"] = s.fps_per_cluster;
    j["mean_distance"] = s.mean_distance;
    j["min_distant_distance"] = s.min_distant_distance;
    j["max_pool_distance"] = s.max_pool_distance;
    j["assign_sinkhorn_iters"] = s.assign_sinkhorn_iters;
    j["assign_residual"] = s.assign_residual;
    j["update_sinkhorn_iters"] = s.update_sinkhorn_iters;
    j["update_residual"] = s.update_residual;
    arr.push_back(std::move(j));
  }
  return arr;
}

}  // namespace xfic
