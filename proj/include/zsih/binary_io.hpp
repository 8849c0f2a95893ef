#pragma once

// Little-endian byte buffers for the binary file formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>

#include "zsih/errors.hpp"

namespace zsih::io {

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view bytes);

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) { put_le(v); }
  void u32(std::uint32_t v) { put_le(v); }
  void u64(std::uint64_t v) { put_le(v); }
  void f32(float v) { put_le(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { put_le(std::bit_cast<std::uint64_t>(v)); }
  void raw(std::string_view bytes) { buf_.append(bytes); }

  /// u32 length then the bytes.
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s);
  }

  const std::string& bytes() const { return buf_; }
  std::string take() { return std::move(buf_); }

 private:
  template <typename U>
  void put_le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }

  std::string buf_;
};

/// Bounds-checked reader. Every failure is a FormatError naming the byte
/// offset and, when set, the current context (e.g. "record 12").
class ByteReader {
 public:
  explicit ByteReader(std::string_view data, std::string source = "")
      : data_(data), source_(std::move(source)) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }
  bool at_end() const { return pos_ == data_.size(); }

  void set_context(std::string context) { context_ = std::move(context); }

  std::uint8_t u8() { return get_le<std::uint8_t>(); }
  std::uint16_t u16() { return get_le<std::uint16_t>(); }
  std::uint32_t u32() { return get_le<std::uint32_t>(); }
  std::uint64_t u64() { return get_le<std::uint64_t>(); }
  float f32() { return std::bit_cast<float>(get_le<std::uint32_t>()); }
  double f64() { return std::bit_cast<double>(get_le<std::uint64_t>()); }

  std::string_view raw(std::size_t n) {
    require(n);
    auto out = data_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  std::string str() {
    const auto n = u32();
    return std::string(raw(n));
  }

  void expect_magic(std::string_view magic) {
    const std::size_t at = pos_;
    if (remaining() < magic.size() || data_.substr(pos_, magic.size()) != magic) {
      fail(at, "bad magic, expected \"" + std::string(magic) + "\"");
    }
    pos_ += magic.size();
  }

  void require(std::size_t n) const {
    if (remaining() < n) {
      fail(pos_, "truncated: need " + std::to_string(n) + " bytes, " + std::to_string(remaining()) +
                     " left");
    }
  }

  [[noreturn]] void fail(std::size_t at, const std::string& what) const {
    std::string msg = source_.empty() ? std::string() : source_ + ": ";
    msg += what + " at byte offset " + std::to_string(at);
    if (!context_.empty()) msg += " (" + context_ + ")";
    throw FormatError(msg);
  }

 private:
  template <typename U>
  U get_le() {
    require(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<U>(static_cast<U>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i));
    }
    pos_ += sizeof(U);
    return v;
  }

  std::string_view data_;
  std::string source_;
  std::string context_;
  std::size_t pos_ = 0;
};

}  // namespace zsih::io
