#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "lsm/common.hpp"

// Little-endian binary I/O helpers. All on-disk formats in this project are
// little-endian regardless of host byte order.

namespace lsm {

inline void put_u8(std::ostream& os, std::uint8_t v) {
  os.put(static_cast<char>(v));
}

inline void put_u16(std::ostream& os, std::uint16_t v) {
  char b[2] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff)};
  os.write(b, 2);
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}

inline void put_f32(std::ostream& os, float v) {
  put_u32(os, std::bit_cast<std::uint32_t>(v));
}

inline void put_f64(std::ostream& os, double v) {
  put_u64(os, std::bit_cast<std::uint64_t>(v));
}

// Bounds-checked reader over a stream; throws format_error at EOF.
class StreamReader {
 public:
  explicit StreamReader(std::istream& is, std::string what = "stream")
      : is_(is), what_(std::move(what)) {}

  void read_exact(void* dst, std::size_t n) {
    is_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n)
      throw format_error("truncated " + what_, offset_);
    offset_ += n;
  }

  std::uint8_t u8() {
    std::uint8_t v;
    read_exact(&v, 1);
    return v;
  }

  std::uint16_t u16() {
    std::uint8_t b[2];
    read_exact(b, 2);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
  }

  std::uint32_t u32() {
    std::uint8_t b[4];
    read_exact(b, 4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }

  std::uint64_t u64() {
    std::uint8_t b[8];
    read_exact(b, 8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }

  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }

  std::string str(std::size_t n) {
    std::string s(n, '\0');
    read_exact(s.data(), n);
    return s;
  }

  std::size_t offset() const { return offset_; }

 private:
  std::istream& is_;
  std::string what_;
  std::size_t offset_ = 0;
};

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw io_error("cannot open for writing: " + p.string());
  return os;
}

inline std::ifstream open_in(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw io_error("cannot open for reading: " + p.string());
  return is;
}

inline std::string slurp_text(const std::filesystem::path& p) {
  auto is = open_in(p);
  std::string s((std::istreambuf_iterator<char>(is)),
                std::istreambuf_iterator<char>());
  return s;
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  auto os = open_out(p);
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
  if (!os) throw io_error("short write: " + p.string());
}

}  // namespace lsm
