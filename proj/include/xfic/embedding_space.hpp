#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "xfic/error.hpp"
#include "xfic/matrix.hpp"

namespace xfic {

/// One paired sample as ingested: raw image-side and text-side vectors.
struct EmbeddingPair {
  std::uint64_t id = 0;
  std::vector<double> img;
  std::vector<double> txt;
  /// Bitmask over n_labels classes, LSB-first per byte. Empty when the corpus is unlabeled.
  std::vector<std::uint8_t> labels;

  bool has_label(std::size_t c) const {
    const std::size_t byte = c / 8;
    return byte < labels.size() && ((labels[byte] >> (c % 8)) & 1u) != 0;
  }

  friend bool operator==(const EmbeddingPair&, const EmbeddingPair&) = default;
};

/// Which modality halves make up the curation space.
enum class CurationSpace { ImageOnly, TextOnly, Concat };

inline std::string_view to_string(CurationSpace s) {
  switch (s) {
    case CurationSpace::ImageOnly: return "image_only";
    case CurationSpace::TextOnly: return "text_only";
    case CurationSpace::Concat: return "concat";
  }
  return "concat";
}

inline std::optional<CurationSpace> parse_curation_space(std::string_view s) {
  if (s == "image_only") return CurationSpace::ImageOnly;
  if (s == "text_only") return CurationSpace::TextOnly;
  if (s == "concat") return CurationSpace::Concat;
  return std::nullopt;
}

/// Returns v scaled to unit Euclidean norm.
///
/// Vectors whose computed norm is already within a few ulps of one are
/// returned unchanged, which makes normalization idempotent bit-for-bit.
inline std::vector<double> l2_normalize(std::span<const double> v) {
  double sq = 0.0;
  for (double x : v) {
    if (!std::isfinite(x)) throw DegenerateVectorError("non-finite entry");
    sq += x * x;
  }
  if (!(sq > 0.0)) throw DegenerateVectorError("zero vector cannot be normalized");
  const double norm = std::sqrt(sq);
  std::vector<double> out(v.begin(), v.end());
  if (std::abs(norm - 1.0) <= 4.0 * std::numeric_limits<double>::epsilon()) return out;
  for (double& x : out) x /= norm;
  return out;
}

inline std::size_t unified_dim(CurationSpace mode, std::size_t d_img, std::size_t d_txt) {
  switch (mode) {
    case CurationSpace::ImageOnly: return d_img;
    case CurationSpace::TextOnly: return d_txt;
    case CurationSpace::Concat: return d_img + d_txt;
  }
  return d_img + d_txt;
}

/// Builds the curation-space vector from two modality vectors: each half is
/// unit-normalized, then the selected halves are concatenated.
inline std::vector<double> unify(std::span<const double> img, std::span<const double> txt,
                                 CurationSpace mode) {
  switch (mode) {
    case CurationSpace::ImageOnly: return l2_normalize(img);
    case CurationSpace::TextOnly: return l2_normalize(txt);
    case CurationSpace::Concat: {
      auto out = l2_normalize(img);
      const auto t = l2_normalize(txt);
      out.insert(out.end(), t.begin(), t.end());
      return out;
    }
  }
  return {};
}

inline std::vector<double> unify(const EmbeddingPair& pair, CurationSpace mode) {
  return unify(pair.img, pair.txt, mode);
}

/// Unified embeddings of several pairs, one row each.
inline Matrix unify_all(std::span<const EmbeddingPair> pairs, CurationSpace mode) {
  Matrix out;
  for (const auto& p : pairs) {
    const auto z = unify(p, mode);
    out.append_row(z);
  }
  return out;
}

inline double euclidean(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("vectors of different dimension");
  return std::sqrt(squared_distance(a, b));
}

/// Entry (i, j) is the Euclidean distance between row i of a and row j of b.
inline Matrix pairwise_distance(const Matrix& a, const Matrix& b) {
  if (!a.empty() && !b.empty() && a.cols() != b.cols())
    throw ShapeError("pairwise_distance: " + std::to_string(a.cols()) + " vs " +
                     std::to_string(b.cols()) + " columns");
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto ai = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) out(i, j) = std::sqrt(squared_distance(ai, b.row(j)));
  }
  return out;
}

}  // namespace xfic
