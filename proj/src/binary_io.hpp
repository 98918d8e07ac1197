#pragma once

// Little-endian primitives shared by the ODSV and ODSC readers and writers.

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "odseg/error.hpp"

namespace odseg::io {

static_assert(std::endian::native == std::endian::little, "on-disk formats assume a little-endian host");

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  template <typename V>
  void value(V v) {
    bytes(&v, sizeof(V));
  }
  void u8(std::uint8_t v) { value(v); }
  void u32(std::uint32_t v) { value(v); }
  void u64(std::uint64_t v) { value(v); }
  void f32(float v) { value(v); }
  /// u32 length followed by the characters.
  void text(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  const std::vector<std::uint8_t>& buffer() const { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

/// Bounds-checked cursor; every overrun raises FormatError naming `what`.
class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& buf, std::string what) : buf_(buf), what_(std::move(what)) {}

  void bytes(void* out, std::size_t n) {
    require(n);
    std::memcpy(out, buf_.data() + pos_, n);
    pos_ += n;
  }
  template <typename V>
  V value() {
    V v;
    bytes(&v, sizeof(V));
    return v;
  }
  std::uint8_t u8() { return value<std::uint8_t>(); }
  std::uint32_t u32() { return value<std::uint32_t>(); }
  std::uint64_t u64() { return value<std::uint64_t>(); }
  float f32() { return value<float>(); }
  std::string text() {
    const std::uint32_t n = u32();
    require(n);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void require(std::size_t n) const {
    if (n > buf_.size() - pos_) throw FormatError(what_ + ": truncated file");
  }
  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  const std::vector<std::uint8_t>& buf_;
  std::string what_;
  std::size_t pos_ = 0;
};

/// Whole-file read; missing or unreadable files raise FormatError.
std::vector<std::uint8_t> read_file(const std::string& path);
/// Writes via a temporary sibling and rename so readers never see partial files.
void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes);

}  // namespace odseg::io
