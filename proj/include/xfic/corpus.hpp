#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "xfic/binary_io.hpp"
#include "xfic/embedding_space.hpp"
#include "xfic/error.hpp"

namespace xfic {

inline constexpr std::string_view kCorpusMagic = "XFICEMB1";
inline constexpr std::uint32_t kCorpusVersion = 1;
inline constexpr std::size_t kCorpusHeaderBytes = 28;

/// A paired-embedding corpus. Vectors are held in double precision; on disk
/// they are 32-bit floats, so values loaded from a file round-trip exactly.
struct Corpus {
  std::uint32_t d_img = 0;
  std::uint32_t d_txt = 0;
  std::uint32_t n_labels = 0;
  std::vector<EmbeddingPair> records;

  std::size_t size() const noexcept { return records.size(); }
  std::size_t label_bytes() const noexcept { return (n_labels + 7) / 8; }
  std::size_t record_bytes() const noexcept { return 8 + 4 * (std::size_t{d_img} + d_txt) + label_bytes(); }

  friend bool operator==(const Corpus&, const Corpus&) = default;
};

/// Layout: 28-byte header (magic, version, record count, d_img, d_txt,
/// n_labels; integers u32 LE) then per record: id u64, d_img f32, d_txt f32,
/// ceil(n_labels/8) label bytes LSB-first.
inline Bytes encode_corpus(const Corpus& corpus) {
  ByteWriter w;
  w.magic(kCorpusMagic);
  w.u32(kCorpusVersion);
  w.u32(static_cast<std::uint32_t>(corpus.size()));
  w.u32(corpus.d_img);
  w.u32(corpus.d_txt);
  w.u32(corpus.n_labels);
  for (const auto& r : corpus.records) {
    if (r.img.size() != corpus.d_img || r.txt.size() != corpus.d_txt)
      throw ShapeError("record " + std::to_string(r.id) + " does not match corpus dimensions");
    w.u64(r.id);
    for (double v : r.img) w.f32(static_cast<float>(v));
    for (double v : r.txt) w.f32(static_cast<float>(v));
    for (std::size_t b = 0; b < corpus.label_bytes(); ++b) w.u8(b < r.labels.size() ? r.labels[b] : 0);
  }
  return std::move(w).bytes();
}

inline Corpus decode_corpus(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic(kCorpusMagic, "corpus");
  const std::uint32_t version = r.u32("version");
  if (version != kCorpusVersion)
    throw FormatError("corpus: unsupported version " + std::to_string(version) + " in field 'version' at byte offset 8");
  const std::uint32_t count = r.u32("record_count");
  Corpus c;
  c.d_img = r.u32("d_img");
  c.d_txt = r.u32("d_txt");
  c.n_labels = r.u32("n_labels");
  if (c.d_img < 1) throw FormatError("corpus: field 'd_img' at byte offset 16 must be >= 1");
  if (c.d_txt < 1) throw FormatError("corpus: field 'd_txt' at byte offset 20 must be >= 1");
  const std::uint64_t expected = kCorpusHeaderBytes + std::uint64_t{count} * c.record_bytes();
  if (expected != bytes.size())
    throw FormatError("corpus: file length " + std::to_string(bytes.size()) +
                      " inconsistent with header fields record_count=" + std::to_string(count) +
                      ", d_img=" + std::to_string(c.d_img) + ", d_txt=" + std::to_string(c.d_txt) +
                      ", n_labels=" + std::to_string(c.n_labels) + " (expected " + std::to_string(expected) +
                      " bytes)");
  c.records.reserve(count);
  std::unordered_set<std::uint64_t> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t start = r.offset();
    EmbeddingPair p;
    p.id = r.u64("id");
    p.img.resize(c.d_img);
    p.txt.resize(c.d_txt);
    for (double& v : p.img) v = r.f32("img");
    for (double& v : p.txt) v = r.f32("txt");
    p.labels.resize(c.label_bytes());
    for (auto& b : p.labels) b = r.u8("labels");
    for (double v : p.img)
      if (!std::isfinite(v)) throw FormatError("corpus: non-finite img entry in record at byte offset " + std::to_string(start));
    for (double v : p.txt)
      if (!std::isfinite(v)) throw FormatError("corpus: non-finite txt entry in record at byte offset " + std::to_string(start));
    if (!seen.insert(p.id).second)
      throw FormatError("corpus: duplicate id " + std::to_string(p.id) + " at byte offset " + std::to_string(start));
    c.records.push_back(std::move(p));
  }
  r.expect_end("corpus");
  return c;
}

/// Ingest check: every modality vector must have a direction.
inline void require_nondegenerate(const Corpus& corpus) {
  for (const auto& r : corpus.records) {
    auto zero = [](const std::vector<double>& v) {
      for (double x : v)
        if (x != 0.0) return false;
      return true;
    };
    if (zero(r.img)) throw DegenerateVectorError("record " + std::to_string(r.id) + " has an all-zero image vector");
    if (zero(r.txt)) throw DegenerateVectorError("record " + std::to_string(r.id) + " has an all-zero text vector");
  }
}

inline void save_corpus(const std::filesystem::path& path, const Corpus& corpus) {
  write_file(path, encode_corpus(corpus));
}

inline Corpus load_corpus(const std::filesystem::path& path) {
  const Bytes bytes = read_file(path);
  try {
    return decode_corpus(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace xfic
