#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "xfic/error.hpp"

namespace xfic {

using Bytes = std::vector<std::uint8_t>;

/// Appends little-endian scalars to a byte buffer.
class ByteWriter {
 public:
  void magic(std::string_view m) { buf_.insert(buf_.end(), m.begin(), m.end()); }
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

  const Bytes& bytes() const& noexcept { return buf_; }
  Bytes bytes() && noexcept { return std::move(buf_); }

 private:
  Bytes buf_;
};

/// Reads little-endian scalars; truncation raises FormatError naming the field and offset.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }

  void expect_magic(std::string_view m, std::string_view what) {
    need(m.size(), "magic");
    if (std::memcmp(data_.data() + pos_, m.data(), m.size()) != 0)
      throw FormatError(std::string(what) + ": bad magic at byte offset " + std::to_string(pos_) +
                        " (expected \"" + std::string(m) + "\")");
    pos_ += m.size();
  }
  std::uint8_t u8(std::string_view field) {
    need(1, field);
    return data_[pos_++];
  }
  std::uint32_t u32(std::string_view field) {
    need(4, field);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(std::string_view field) {
    need(8, field);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32(std::string_view field) { return std::bit_cast<float>(u32(field)); }
  double f64(std::string_view field) { return std::bit_cast<double>(u64(field)); }

  void expect_end(std::string_view what) const {
    if (pos_ != data_.size())
      throw FormatError(std::string(what) + ": " + std::to_string(data_.size() - pos_) +
                        " trailing bytes at byte offset " + std::to_string(pos_));
  }

 private:
  void need(std::size_t n, std::string_view field) const {
    if (data_.size() - pos_ < n)
      throw FormatError("truncated input reading " + std::string(field) + " at byte offset " +
                        std::to_string(pos_));
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open file: " + path.string());
  Bytes out((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw FormatError("read failed: " + path.string());
  return out;
}

inline std::string read_text_file(const std::filesystem::path& path) {
  const Bytes b = read_file(path);
  return std::string(b.begin(), b.end());
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open file for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed: " + path.string());
}

inline void write_text_file(const std::filesystem::path& path, std::string_view text) {
  write_file(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

}  // namespace xfic
