#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "xfic/corpus.hpp"
#include "xfic/matrix.hpp"
#include "xfic/rng.hpp"

namespace xfic::testing {

inline Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) m(i, j) = scale * rng.normal();
  return m;
}

inline std::vector<double> random_vector(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

/// Gaussian paired corpus; values pre-rounded to f32 so file round trips are exact.
inline Corpus random_corpus(Rng& rng, std::size_t n, std::uint32_t d_img, std::uint32_t d_txt,
                            std::uint32_t n_labels = 0) {
  Corpus c;
  c.d_img = d_img;
  c.d_txt = d_txt;
  c.n_labels = n_labels;
  for (std::size_t i = 0; i < n; ++i) {
    EmbeddingPair p;
    p.id = 1000 + i;
    for (std::uint32_t j = 0; j < d_img; ++j) p.img.push_back(static_cast<float>(rng.normal()));
    for (std::uint32_t j = 0; j < d_txt; ++j) p.txt.push_back(static_cast<float>(rng.normal()));
    p.labels.assign(c.label_bytes(), 0);
    for (std::uint32_t l = 0; l < n_labels; ++l)
      if (rng.uniform() < 0.3) p.labels[l / 8] |= static_cast<std::uint8_t>(1u << (l % 8));
    c.records.push_back(std::move(p));
  }
  return c;
}

/// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    Rng rng(std::hash<std::string>{}(tag) ^ static_cast<std::uint64_t>(
                                                 std::filesystem::file_time_type::clock::now().time_since_epoch().count()));
    path_ = std::filesystem::temp_directory_path() / ("xfic_" + tag + "_" + std::to_string(rng.next_u64() % 1000000007));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace xfic::testing
