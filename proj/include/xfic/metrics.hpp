#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "xfic/binary_io.hpp"
#include "xfic/corpus.hpp"
#include "xfic/embedding_space.hpp"
#include "xfic/error.hpp"
#include "xfic/matrix.hpp"
#include "xfic/trainer.hpp"

namespace xfic {

/// Text-side embeddings of "<class>" and "no <class>" for one class.
struct PromptPair {
  std::string name;
  std::vector<double> positive;
  std::vector<double> negative;

  friend bool operator==(const PromptPair&, const PromptPair&) = default;
};

/// Positive component of softmax({pos_sim / tau, neg_sim / tau}).
inline double zero_shot_prob_from_sims(double pos_sim, double neg_sim, double tau) {
  if (!(tau > 0.0)) throw UsageError("parameter error: temperature must be positive");
  return 1.0 / (1.0 + std::exp((neg_sim - pos_sim) / tau));
}

/// Zero-shot probability for unit-norm image and prompt vectors living in the same space.
inline double zero_shot_prob(std::span<const double> img_unit, std::span<const double> pos_unit,
                             std::span<const double> neg_unit, double tau) {
  if (img_unit.size() != pos_unit.size() || img_unit.size() != neg_unit.size())
    throw ShapeError("zero_shot_prob: image and prompt dimensions differ");
  return zero_shot_prob_from_sims(dot(img_unit, pos_unit), dot(img_unit, neg_unit), tau);
}

/// Image-side vector in the comparison space: head projection (when given), then unit norm.
inline std::vector<double> embed_image(std::span<const double> raw, const ProjectionHead* head) {
  return head ? l2_normalize(head->project_img(raw)) : l2_normalize(raw);
}

inline std::vector<double> embed_text(std::span<const double> raw, const ProjectionHead* head) {
  return head ? l2_normalize(head->project_txt(raw)) : l2_normalize(raw);
}

/// Probability of the prompt's positive class for one raw image vector.
inline double zero_shot_prob(std::span<const double> raw_img, const PromptPair& prompt, const ProjectionHead* head,
                             double tau) {
  return zero_shot_prob(embed_image(raw_img, head), embed_text(prompt.positive, head),
                        embed_text(prompt.negative, head), tau);
}

namespace detail {

inline void count_classes(std::span<const std::uint8_t> labels, std::size_t& pos, std::size_t& neg) {
  pos = 0;
  for (auto l : labels) pos += (l != 0);
  neg = labels.size() - pos;
}

/// Indices ordered by ascending score.
inline std::vector<std::size_t> order_by_score(std::span<const double> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::ranges::stable_sort(idx, [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  return idx;
}

}  // namespace detail

/// AUROC with pair-counting semantics: (concordant + tied / 2) / (P * N),
/// evaluated in O(n log n) by sweeping groups of equal score.
inline double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw ShapeError("auroc: scores and labels differ in length");
  std::size_t p = 0, n = 0;
  detail::count_classes(labels, p, n);
  if (p == 0 || n == 0) throw UndefinedMetricError("AUROC needs at least one positive and one negative");
  const auto idx = detail::order_by_score(scores);
  std::uint64_t concordant = 0, tied = 0, neg_below = 0;
  for (std::size_t g = 0; g < idx.size();) {
    std::size_t h = g;
    std::uint64_t gp = 0, gn = 0;
    while (h < idx.size() && scores[idx[h]] == scores[idx[g]]) {
      (labels[idx[h]] ? gp : gn) += 1;
      ++h;
    }
    concordant += gp * neg_below;
    tied += gp * gn;
    neg_below += gn;
    g = h;
  }
  return (static_cast<double>(concordant) + 0.5 * static_cast<double>(tied)) /
         (static_cast<double>(p) * static_cast<double>(n));
}

/// Average precision: sum over score groups (descending) of (R_k - R_{k-1}) * P_k.
inline double auprc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw ShapeError("auprc: scores and labels differ in length");
  std::size_t p = 0, n = 0;
  detail::count_classes(labels, p, n);
  if (p == 0) throw UndefinedMetricError("AUPRC needs at least one positive");
  auto idx = detail::order_by_score(scores);
  std::ranges::reverse(idx);
  double ap = 0.0, prev_recall = 0.0;
  std::size_t tp = 0, fp = 0;
  for (std::size_t g = 0; g < idx.size();) {
    std::size_t h = g;
    while (h < idx.size() && scores[idx[h]] == scores[idx[g]]) {
      (labels[idx[h]] ? tp : fp) += 1;
      ++h;
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(p);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    g = h;
  }
  return ap;
}

struct MacroAverage {
  double value = 0.0;
  std::size_t included = 0;
  std::size_t excluded = 0;
};

/// Unweighted mean over classes whose metric is defined.
inline MacroAverage macro_average(std::span<const std::optional<double>> per_class) {
  MacroAverage out;
  double sum = 0.0;
  for (const auto& v : per_class) {
    if (v) {
      sum += *v;
      ++out.included;
    } else {
      ++out.excluded;
    }
  }
  if (out.included == 0) throw UndefinedMetricError("no class has a defined metric");
  out.value = sum / static_cast<double>(out.included);
  return out;
}

enum class RetrievalDirection { ImageToText, TextToImage };

/// Fraction of queries whose top-1 item (ties to the smallest index) is the
/// paired one. Image-to-text queries are rows of `sim`; text-to-image are columns.
inline double recall_at_1(const Matrix& sim, RetrievalDirection dir) {
  if (sim.rows() != sim.cols()) throw ShapeError("recall_at_1 needs a square similarity matrix");
  const std::size_t n = sim.rows();
  if (n == 0) throw ShapeError("recall_at_1 needs a nonempty similarity matrix");
  std::size_t hits = 0;
  for (std::size_t q = 0; q < n; ++q) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < n; ++c) {
      const double v = dir == RetrievalDirection::ImageToText ? sim(q, c) : sim(c, q);
      const double b = dir == RetrievalDirection::ImageToText ? sim(q, best) : sim(best, q);
      if (v > b) best = c;
    }
    hits += (best == q);
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

namespace detail {

/// recall_at_1 over rows of queries . items^T without materializing the matrix.
inline double streaming_recall_at_1(const Matrix& queries, const Matrix& items) {
  const std::size_t n = queries.rows();
  std::size_t hits = 0;
  for (std::size_t q = 0; q < n; ++q) {
    std::size_t best = 0;
    double best_v = dot(queries.row(q), items.row(0));
    for (std::size_t c = 1; c < n; ++c) {
      const double v = dot(queries.row(q), items.row(c));
      if (v > best_v) {
        best_v = v;
        best = c;
      }
    }
    hits += (best == q);
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

}  // namespace detail

struct ClassMetrics {
  std::string name;
  std::optional<double> auroc;
  std::optional<double> auprc;
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
};

struct MetricReport {
  std::vector<ClassMetrics> classes;
  std::optional<double> macro_auroc;
  std::optional<double> macro_auprc;
  std::size_t auroc_excluded = 0;
  std::size_t auprc_excluded = 0;
  double recall_i2t = 0.0;
  double recall_t2i = 0.0;
  std::size_t n_samples = 0;
  double tau = 1.0;
};

struct EvalOptions {
  /// Temperature for zero-shot softmax; unset = the head's learned value (1 without a head).
  std::optional<double> tau;
};

/// Zero-shot classification and cross-modal retrieval on a labeled corpus.
/// Without a head the raw vectors are compared directly (requires d_img == d_txt).
inline MetricReport evaluate(const Corpus& corpus, std::span<const PromptPair> prompts, const ProjectionHead* head,
                             const EvalOptions& opt = {}) {
  if (corpus.size() == 0) throw UsageError("evaluation corpus is empty");
  if (head) {
    if (head->d_img() != corpus.d_img || head->d_txt() != corpus.d_txt)
      throw ShapeError("head dimensions do not match the evaluation corpus");
  } else if (corpus.d_img != corpus.d_txt) {
    throw ShapeError("evaluation without a head needs d_img == d_txt");
  }
  if (prompts.size() > corpus.n_labels)
    throw UsageError("more prompt classes than corpus labels");

  MetricReport rep;
  rep.n_samples = corpus.size();
  rep.tau = opt.tau ? *opt.tau : (head ? head->tau() : 1.0);

  Matrix img, txt;
  for (const auto& r : corpus.records) {
    img.append_row(embed_image(r.img, head));
    txt.append_row(embed_text(r.txt, head));
  }

  std::vector<std::optional<double>> aurocs, auprcs;
  for (std::size_t c = 0; c < prompts.size(); ++c) {
    const auto& pr = prompts[c];
    if (pr.positive.size() != corpus.d_txt || pr.negative.size() != corpus.d_txt)
      throw ShapeError("prompt '" + pr.name + "' does not match the text dimension");
    const auto pos = embed_text(pr.positive, head);
    const auto neg = embed_text(pr.negative, head);
    std::vector<double> scores(corpus.size());
    std::vector<std::uint8_t> labels(corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      scores[i] = zero_shot_prob(img.row(i), pos, neg, rep.tau);
      labels[i] = corpus.records[i].has_label(c) ? 1 : 0;
    }
    ClassMetrics cm;
    cm.name = pr.name;
    detail::count_classes(labels, cm.n_pos, cm.n_neg);
    if (cm.n_pos > 0 && cm.n_neg > 0) cm.auroc = auroc(scores, labels);
    if (cm.n_pos > 0) cm.auprc = auprc(scores, labels);
    aurocs.push_back(cm.auroc);
    auprcs.push_back(cm.auprc);
    rep.classes.push_back(std::move(cm));
  }
  if (!prompts.empty()) {
    if (std::ranges::any_of(aurocs, [](const auto& v) { return v.has_value(); })) {
      const auto m = macro_average(aurocs);
      rep.macro_auroc = m.value;
      rep.auroc_excluded = m.excluded;
    } else {
      rep.auroc_excluded = aurocs.size();
    }
    if (std::ranges::any_of(auprcs, [](const auto& v) { return v.has_value(); })) {
      const auto m = macro_average(auprcs);
      rep.macro_auprc = m.value;
      rep.auprc_excluded = m.excluded;
    } else {
      rep.auprc_excluded = auprcs.size();
    }
  }

  rep.recall_i2t = detail::streaming_recall_at_1(img, txt);
  rep.recall_t2i = detail::streaming_recall_at_1(txt, img);
  return rep;
}

namespace detail {
inline nlohmann::ordered_json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}
}  // namespace detail

inline nlohmann::ordered_json report_json(const MetricReport& rep) {
  nlohmann::ordered_json j;
  j["n_samples"] = rep.n_samples;
  j["tau"] = rep.tau;
  j["macro_auroc"] = detail::optional_json(rep.macro_auroc);
  j["macro_auprc"] = detail::optional_json(rep.macro_auprc);
  j["auroc_excluded_classes"] = rep.auroc_excluded;
  j["auprc_excluded_classes"] = rep.auprc_excluded;
  j["recall_at_1_image_to_text"] = rep.recall_i2t;
  j["recall_at_1_text_to_image"] = rep.recall_t2i;
  auto classes = nlohmann::ordered_json::array();
  for (const auto& c : rep.classes) {
    nlohmann::ordered_json cj;
    cj["class"] = c.name;
    cj["auroc"] = detail::optional_json(c.auroc);
    cj["auprc"] = detail::optional_json(c.auprc);
    cj["n_pos"] = c.n_pos;
    cj["n_neg"] = c.n_neg;
    classes.push_back(std::move(cj));
  }
  j["classes"] = std::move(classes);
  return j;
}

/// CSV `class,auroc,auprc,n_pos,n_neg`; undefined metrics are empty fields.
inline std::string per_class_csv(const MetricReport& rep) {
  std::string out = "class,auroc,auprc,n_pos,n_neg\n";
  char buf[64];
  auto field = [&](const std::optional<double>& v) -> std::string {
    if (!v) return "";
    std::snprintf(buf, sizeof buf, "%.9g", *v);
    return buf;
  };
  for (const auto& c : rep.classes)
    out += c.name + "," + field(c.auroc) + "," + field(c.auprc) + "," + std::to_string(c.n_pos) + "," +
           std::to_string(c.n_neg) + "\n";
  return out;
}

/// Prompt file: {"classes": [{"name": ..., "positive": [...], "negative": [...]}, ...]}.
inline nlohmann::ordered_json prompts_json(std::span<const PromptPair> prompts) {
  nlohmann::ordered_json j;
  auto arr = nlohmann::ordered_json::array();
  for (const auto& p : prompts) {
    nlohmann::ordered_json pj;
    pj["name"] = p.name;
    pj["positive"] = p.positive;
    pj["negative"] = p.negative;
    arr.push_back(std::move(pj));
  }
  j["classes"] = std::move(arr);
  return j;
}

inline std::vector<PromptPair> parse_prompts(std::string_view text) {
  std::vector<PromptPair> out;
  try {
    const auto j = nlohmann::json::parse(text);
    for (const auto& pj : j.at("classes")) {
      PromptPair p;
      p.name = pj.at("name").get<std::string>();
      p.positive = pj.at("positive").get<std::vector<double>>();
      p.negative = pj.at("negative").get<std::vector<double>>();
      if (p.positive.empty() || p.positive.size() != p.negative.size())
        throw FormatError("prompt '" + p.name + "' has empty or mismatched embeddings");
      for (const auto* v : {&p.positive, &p.negative}) {
        bool nonzero = false;
        for (double x : *v) {
          if (!std::isfinite(x)) throw FormatError("prompt '" + p.name + "' has a non-finite entry");
          nonzero = nonzero || x != 0.0;
        }
        if (!nonzero) throw FormatError("prompt '" + p.name + "' has an all-zero embedding");
      }
      out.push_back(std::move(p));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("prompt file: ") + e.what());
  }
  return out;
}

inline std::vector<PromptPair> load_prompts(const std::filesystem::path& path) {
  return parse_prompts(read_text_file(path));
}

}  // namespace xfic
