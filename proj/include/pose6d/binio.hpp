#pragma once

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "pose6d/errors.hpp"

namespace pose6d {
namespace binio {

// Little-endian primitives for checkpoint and array files, independent of
// host byte order.

inline void write_u32(std::ostream& out, std::uint32_t v) {
  char b[4] = {char(v & 0xff), char((v >> 8) & 0xff), char((v >> 16) & 0xff),
               char((v >> 24) & 0xff)};
  out.write(b, 4);
}

inline std::uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw data_error("truncated stream while reading u32");
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
         std::uint32_t(b[3]) << 24;
}

inline void write_i32(std::ostream& out, std::int32_t v) { write_u32(out, std::uint32_t(v)); }
inline std::int32_t read_i32(std::istream& in) { return std::int32_t(read_u32(in)); }

inline void write_f64(std::ostream& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = char((bits >> (8 * i)) & 0xff);
  out.write(b, 8);
}

inline double read_f64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw data_error("truncated stream while reading f64");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= std::uint64_t(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

inline void write_f64_array(std::ostream& out, const std::vector<double>& v) {
  write_u32(out, std::uint32_t(v.size()));
  for (double x : v) write_f64(out, x);
}

inline std::vector<double> read_f64_array(std::istream& in) {
  std::uint32_t n = read_u32(in);
  std::vector<double> v(n);
  for (auto& x : v) x = read_f64(in);
  return v;
}

inline void write_tag(std::ostream& out, const char tag[4]) { out.write(tag, 4); }

inline void expect_tag(std::istream& in, const char tag[4], const std::string& what) {
  char b[4];
  in.read(b, 4);
  if (!in || std::memcmp(b, tag, 4) != 0) throw data_error("bad magic tag in " + what);
}

}  // namespace binio
}  // namespace pose6d
