#pragma once

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "xfic/analysis.hpp"
#include "xfic/config.hpp"
#include "xfic/corpus.hpp"
#include "xfic/curation.hpp"
#include "xfic/metrics.hpp"
#include "xfic/synth.hpp"
#include "xfic/trainer.hpp"

namespace xfic {

/// Records of `corpus` with the given ids, in id-list order.
inline std::vector<const EmbeddingPair*> select_records(const Corpus& corpus, std::span<const std::uint64_t> ids) {
  std::unordered_map<std::uint64_t, const EmbeddingPair*> by_id;
  by_id.reserve(corpus.size());
  for (const auto& r : corpus.records) by_id.emplace(r.id, &r);
  std::vector<const EmbeddingPair*> out;
  out.reserve(ids.size());
  for (auto id : ids) {
    const auto it = by_id.find(id);
    if (it == by_id.end()) throw FormatError("selection id " + std::to_string(id) + " is not in the corpus");
    out.push_back(it->second);
  }
  return out;
}

inline std::vector<std::uint64_t> load_selection_ids(const std::filesystem::path& path) {
  std::vector<SelectionEntry> entries;
  try {
    entries = parse_selection_csv(read_text_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  std::vector<std::uint64_t> ids;
  ids.reserve(entries.size());
  for (const auto& e : entries) ids.push_back(e.id);
  return ids;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::ordered_json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

/// Joint curation pass followed by reuse epochs over the emitted selection.
///
/// The cosine schedule needs its horizon before the selection size is known,
/// so it is set from the largest selection the configuration allows.
struct JointRun {
  CurationResult curation;
  TrainResult trained;
};

inline JointRun run_joint(const Corpus& corpus, const EngineConfig& cfg) {
  const auto iters = planned_iterations(corpus.size(), cfg.curation);
  const auto& tc = cfg.trainer;
  const auto& cc = cfg.curation;
  const std::size_t kept = cc.superbatch_size - fraction_count(cc.outlier_frac, cc.superbatch_size);
  std::size_t max_selected = iters * (fraction_count(cc.keep_frac, kept) + cc.num_prototypes * cc.per_cluster_budget);
  if (cc.target_subset_size > 0) max_selected = std::min(max_selected, cc.target_subset_size);
  std::size_t horizon = iters;
  if (max_selected >= 2) horizon += (tc.epochs - 1) * batches_per_epoch(max_selected, tc.batch_size);
  if (horizon == 0) horizon = 1;
  Trainer trainer(ProjectionHead::random(corpus.d_img, corpus.d_txt, tc.d_shared, tc.tau_init, tc.seed), tc, horizon);
  JointRun out;
  out.curation = run_curation(corpus, cfg.curation, RunMode::Joint, &trainer);
  if (tc.epochs > 1 && !out.curation.selection.entries.empty()) {
    const auto ids = out.curation.selection.ids();
    const auto samples = select_records(corpus, ids);
    // Keep the reuse epochs inside the declared horizon.
    const std::size_t need = (tc.epochs - 1) * batches_per_epoch(samples.size(), tc.batch_size);
    if (trainer.steps_taken() + need > trainer.horizon())
      throw UsageError("joint training: batch_size too small for the reuse schedule (needs " + std::to_string(need) +
                       " steps, horizon leaves " + std::to_string(trainer.horizon() - trainer.steps_taken()) + ")");
    Rng rng(tc.seed ^ 0x9E3779B97F4A7C15ull);
    run_epochs(trainer, samples, tc.epochs - 1, tc.batch_size, 1, rng);
  }
  out.trained = {trainer.head(), trainer.curve()};
  return out;
}

namespace detail {

inline std::string csv_real(double v) { return format_g9(v); }

inline nlohmann::ordered_json test_json(const TestResult& t) {
  nlohmann::ordered_json j;
  j["statistic"] = std::isfinite(t.statistic) ? nlohmann::ordered_json(t.statistic)
                                              : nlohmann::ordered_json(t.statistic > 0 ? "inf" : "-inf");
  j["df"] = t.df;
  j["p_value"] = t.p_value;
  j["mean_a"] = t.mean_a;
  j["mean_b"] = t.mean_b;
  j["n_a"] = t.n_a;
  j["n_b"] = t.n_b;
  return j;
}

inline nlohmann::ordered_json summary_json(const RunSummary& s) {
  nlohmann::ordered_json j;
  j["mean"] = s.mean;
  j["sd"] = s.sd;
  j["se"] = s.se;
  j["ci95_halfwidth"] = s.ci95_halfwidth;
  return j;
}

inline std::string ecdf_csv(std::span<const std::pair<double, double>> points) {
  std::string out = "value,fraction\n";
  for (const auto& [v, f] : points) out += csv_real(v) + "," + csv_real(f) + "\n";
  return out;
}

/// runs.csv: header `seed,curated,random`, one row per paired run.
inline std::pair<std::vector<double>, std::vector<double>> parse_runs_csv(std::string_view text) {
  std::vector<double> a, b;
  std::size_t line_no = 0, start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    auto line = trim(text.substr(start, end - start));
    start = end + 1;
    ++line_no;
    if (line_no == 1) {
      if (line != "seed,curated,random") throw FormatError("runs file: expected header 'seed,curated,random'");
      continue;
    }
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 3) throw FormatError("runs file line " + std::to_string(line_no) + ": expected 3 fields");
    a.push_back(parse_number<double>(f[1], "curated", line_no));
    b.push_back(parse_number<double>(f[2], "random", line_no));
  }
  return {a, b};
}

}  // namespace detail

struct AnalysisBundle {
  DensityProfile full;
  std::optional<std::vector<double>> subset_values;
  nlohmann::ordered_json tests;
};

/// Writes the analysis bundle into `dir` (created if needed).
inline AnalysisBundle write_analysis(const Corpus& corpus, const std::optional<std::vector<std::uint64_t>>& subset,
                                     const EngineConfig& cfg, const std::filesystem::path& dir,
                                     const std::optional<std::filesystem::path>& runs_path) {
  require_nondegenerate(corpus);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw FormatError("cannot create output directory: " + dir.string());

  const Matrix z = unify_all(corpus.records, cfg.curation.space);
  AnalysisBundle out;
  out.full = knn_mean_distance(z, cfg.analysis.knn_k);

  std::string knn = "id,knn_mean\n";
  for (std::size_t i = 0; i < corpus.size(); ++i)
    knn += std::to_string(corpus.records[i].id) + "," + detail::csv_real(out.full.values[i]) + "\n";
  write_text_file(dir / "knn_profile.csv", knn);
  write_text_file(dir / "ecdf_full.csv", detail::ecdf_csv(ecdf(out.full.values)));

  const auto pca = pca2(z);
  std::string pcs = "id,pc1,pc2\n";
  for (std::size_t i = 0; i < corpus.size(); ++i)
    pcs += std::to_string(corpus.records[i].id) + "," + detail::csv_real(pca.projections(i, 0)) + "," +
           detail::csv_real(pca.projections(i, 1)) + "\n";
  write_text_file(dir / "pca2.csv", pcs);

  auto& t = out.tests;
  t["knn_k"] = out.full.k;
  t["full"] = {{"n", corpus.size()}, {"knn_mean", out.full.mean}, {"knn_sd", out.full.sd}};
  t["pca_explained"] = {pca.explained[0], pca.explained[1]};

  std::vector<const EmbeddingPair*> subset_records;
  if (subset) {
    std::unordered_map<std::uint64_t, std::size_t> row_of;
    for (std::size_t i = 0; i < corpus.size(); ++i) row_of.emplace(corpus.records[i].id, i);
    std::vector<double> sub;
    sub.reserve(subset->size());
    for (auto id : *subset) {
      const auto it = row_of.find(id);
      if (it == row_of.end()) throw FormatError("selection id " + std::to_string(id) + " is not in the corpus");
      sub.push_back(out.full.values[it->second]);
      subset_records.push_back(&corpus.records[it->second]);
    }
    if (sub.empty()) throw UsageError("selection is empty");
    write_text_file(dir / "ecdf_subset.csv", detail::ecdf_csv(ecdf(sub)));
    const auto [m, s] = detail::mean_sd(sub);
    t["subset"] = {{"n", sub.size()}, {"knn_mean", m}, {"knn_sd", s}};
    t["low_density_quantile"] = cfg.analysis.low_density_quantile;
    t["low_density_proportion"] = low_density_proportion(sub, out.full.values, cfg.analysis.low_density_quantile);
    if (sub.size() >= 2) t["welch_subset_vs_full"] = detail::test_json(welch_t(sub, out.full.values));
    out.subset_values = std::move(sub);
  }

  if (runs_path) {
    const auto [a, b] = detail::parse_runs_csv(read_text_file(*runs_path));
    t["runs"] = {{"curated", detail::summary_json(run_summary(a))},
                 {"random", detail::summary_json(run_summary(b))},
                 {"paired_t", detail::test_json(paired_t(a, b))}};
  }

  if (corpus.n_labels > 0) {
    std::vector<const EmbeddingPair*> all;
    all.reserve(corpus.size());
    for (const auto& r : corpus.records) all.push_back(&r);
    const auto full_h = label_histogram(all, corpus.n_labels);
    std::string labels = "class,full_count,full_fraction,subset_count,subset_fraction,delta\n";
    std::optional<LabelHistogram> sub_h;
    std::vector<double> deltas;
    if (subset) {
      sub_h = label_histogram(subset_records, corpus.n_labels);
      deltas = label_deltas(full_h, *sub_h);
    }
    for (std::size_t c = 0; c < corpus.n_labels; ++c) {
      labels += std::to_string(c) + "," + std::to_string(full_h.counts[c]) + "," + detail::csv_real(full_h.fractions[c]);
      if (sub_h)
        labels += "," + std::to_string(sub_h->counts[c]) + "," + detail::csv_real(sub_h->fractions[c]) + "," +
                  detail::csv_real(deltas[c]);
      else
        labels += ",,,";
      labels += "\n";
    }
    write_text_file(dir / "labels.csv", labels);
  }
  write_json(dir / "tests.json", t);
  return out;
}

/// Runs one CLI invocation and returns the process exit code.
inline int cli_dispatch(int argc, const char* const* argv, std::ostream& out = std::cout,
                        std::ostream& err = std::cerr) {
  CLI::App app{"Prototype-driven data curation for paired embeddings", "xfic"};
  app.require_subcommand(1);

  std::string config_path, corpus_path, out_path, proto_out, stats_out, mode = "frozen", prompts_out, holdout_out,
      manifest_out, selection_path, selection_out, head_out, loss_out, head_path, prompts_path, per_class_out,
      out_dir, runs_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> target_size;

  auto* gen = app.add_subcommand("generate", "Generate a synthetic long-tailed corpus");
  gen->add_option("--config", config_path, "Config file")->required();
  gen->add_option("--out", out_path, "Corpus output path")->required();
  gen->add_option("--prompts-out", prompts_out, "Prompt embeddings (JSON)");
  gen->add_option("--holdout-out", holdout_out, "Held-out split corpus");
  gen->add_option("--manifest", manifest_out, "Mixture manifest (JSON)");
  gen->add_option("--seed", seed, "Override the config seed");

  auto* cur = app.add_subcommand("curate", "Curate a corpus with frozen or jointly trained embeddings");
  cur->add_option("--config", config_path, "Config file")->required();
  cur->add_option("--corpus", corpus_path, "Input corpus")->required();
  cur->add_option("--out", out_path, "Selection CSV")->required();
  cur->add_option("--proto-out", proto_out, "Final prototypes")->required();
  cur->add_option("--stats-out", stats_out, "Per-iteration statistics (JSON)");
  cur->add_option("--mode", mode, "frozen | joint")->check(CLI::IsMember({"frozen", "joint"}));
  cur->add_option("--seed", seed, "Override the config seed");
  cur->add_option("--target-size", target_size, "Stop once this many samples are selected");

  auto* trn = app.add_subcommand("train", "Train a projection head (joint curation when no selection is given)");
  trn->add_option("--config", config_path, "Config file")->required();
  trn->add_option("--corpus", corpus_path, "Input corpus")->required();
  trn->add_option("--selection", selection_path, "Selection CSV to train on");
  trn->add_option("--head-out", head_out, "Head checkpoint")->required();
  trn->add_option("--loss-out", loss_out, "Loss curve CSV")->required();
  trn->add_option("--selection-out", selection_out, "Selection CSV from joint curation");
  trn->add_option("--proto-out", proto_out, "Prototypes from joint curation");
  trn->add_option("--seed", seed, "Override the config seed");
  trn->add_option("--target-size", target_size, "Joint curation size cap");

  auto* ev = app.add_subcommand("eval", "Zero-shot classification and retrieval metrics");
  ev->add_option("--config", config_path, "Config file")->required();
  ev->add_option("--corpus", corpus_path, "Labeled evaluation corpus")->required();
  ev->add_option("--head", head_path, "Head checkpoint (omit to compare raw vectors)");
  ev->add_option("--prompts", prompts_path, "Prompt embeddings (JSON)")->required();
  ev->add_option("--out", out_path, "Metric report (JSON)")->required();
  ev->add_option("--per-class-out", per_class_out, "Per-class metrics CSV");

  auto* an = app.add_subcommand("analyze", "Density, PCA, label and run statistics");
  an->add_option("--config", config_path, "Config file")->required();
  an->add_option("--corpus", corpus_path, "Input corpus")->required();
  an->add_option("--selection", selection_path, "Selection CSV");
  an->add_option("--out-dir", out_dir, "Output directory")->required();
  an->add_option("--runs", runs_path, "Paired run metrics CSV (seed,curated,random)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }

  try {
    EngineConfig cfg = load_config(config_path);
    if (seed) cfg.apply_seed(*seed);
    if (target_size) cfg.curation.target_subset_size = *target_size;

    if (*gen) {
      const auto synth = generate_corpus(cfg.synth);
      save_corpus(out_path, synth.corpus);
      if (!holdout_out.empty()) {
        if (cfg.synth.holdout_samples == 0) throw UsageError("--holdout-out given but holdout_samples is 0");
        save_corpus(holdout_out, synth.holdout);
      }
      if (!prompts_out.empty()) write_json(prompts_out, prompts_json(generate_prompts(cfg.synth)));
      if (!manifest_out.empty()) write_json(manifest_out, manifest_json(cfg.synth, synth));
      out << "generated " << synth.corpus.size() << " samples";
      if (!holdout_out.empty()) out << " and " << synth.holdout.size() << " held-out samples";
      out << "\n";
      return 0;
    }

    const Corpus corpus = load_corpus(corpus_path);
    require_nondegenerate(corpus);

    if (*cur) {
      CurationResult res;
      if (mode == "joint") {
        const auto& tc = cfg.trainer;
        Trainer trainer(ProjectionHead::random(corpus.d_img, corpus.d_txt, tc.d_shared, tc.tau_init, tc.seed), tc,
                        std::max<std::size_t>(1, planned_iterations(corpus.size(), cfg.curation)));
        res = run_curation(corpus, cfg.curation, RunMode::Joint, &trainer);
      } else {
        res = run_curation(corpus, cfg.curation, RunMode::Frozen);
      }
      write_text_file(out_path, selection_csv(res.selection.entries));
      save_prototypes(proto_out, res.bank);
      if (!stats_out.empty()) write_json(stats_out, iteration_stats_json(res.selection.iterations));
      out << "selected " << res.selection.entries.size() << " of " << corpus.size() << " samples in "
          << res.selection.iterations.size() << " iterations\n";
      return 0;
    }

    if (*trn) {
      TrainResult trained;
      if (!selection_path.empty()) {
        if (!selection_out.empty() || !proto_out.empty())
          throw UsageError("--selection-out and --proto-out apply only to joint training");
        const auto ids = load_selection_ids(selection_path);
        trained = train_head(select_records(corpus, ids), corpus.d_img, corpus.d_txt, cfg.trainer);
      } else {
        auto joint = run_joint(corpus, cfg);
        if (!selection_out.empty()) write_text_file(selection_out, selection_csv(joint.curation.selection.entries));
        if (!proto_out.empty()) save_prototypes(proto_out, joint.curation.bank);
        trained = std::move(joint.trained);
      }
      save_head(head_out, trained.head);
      write_text_file(loss_out, loss_curve_csv(trained.curve));
      out << "trained " << trained.curve.size() << " steps";
      if (!trained.curve.empty()) out << ", final loss " << format_g9(trained.curve.back().loss);
      out << "\n";
      return 0;
    }

    if (*ev) {
      std::optional<ProjectionHead> head;
      if (!head_path.empty()) head = load_head(head_path);
      const auto prompts = load_prompts(prompts_path);
      EvalOptions opt;
      if (cfg.zero_shot_tau > 0.0) opt.tau = cfg.zero_shot_tau;
      const auto rep = evaluate(corpus, prompts, head ? &*head : nullptr, opt);
      write_json(out_path, report_json(rep));
      if (!per_class_out.empty()) write_text_file(per_class_out, per_class_csv(rep));
      out << "macro AUROC " << (rep.macro_auroc ? format_g9(*rep.macro_auroc) : "undefined") << ", Recall@1 i2t "
          << format_g9(rep.recall_i2t) << ", t2i " << format_g9(rep.recall_t2i) << "\n";
      return 0;
    }

    if (*an) {
      std::optional<std::vector<std::uint64_t>> subset;
      if (!selection_path.empty()) subset = load_selection_ids(selection_path);
      std::optional<std::filesystem::path> runs;
      if (!runs_path.empty()) runs = runs_path;
      const auto bundle = write_analysis(corpus, subset, cfg, out_dir, runs);
      out << "full-set mean kNN distance " << format_g9(bundle.full.mean) << "\n";
      return 0;
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::bad_alloc&) {
    err << "error: out of memory\n";
    return 3;
  }
  return 1;
}

}  // namespace xfic
