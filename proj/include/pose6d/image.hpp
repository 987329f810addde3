#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "pose6d/binio.hpp"
#include "pose6d/errors.hpp"
#include "pose6d/tensor.hpp"

namespace pose6d {

/// RGB image, planar channel-major storage (c, y, x), values in [0, 1].
struct Image {
  int width = 0, height = 0;
  std::vector<double> data;

  Image() = default;
  Image(int w, int h) : width(w), height(h), data(std::size_t(3) * w * h, 0.0) {}

  double& at(int c, int y, int x) { return data[(std::size_t(c) * height + y) * width + x]; }
  double at(int c, int y, int x) const { return data[(std::size_t(c) * height + y) * width + x]; }
};

inline Tensor image_to_tensor(const Image& img) {
  Tensor t({3, img.height, img.width});
  t.data = img.data;
  return t;
}

inline std::uint8_t to_byte(double v) {
  if (v <= 0.0) return 0;
  if (v >= 1.0) return 255;
  return std::uint8_t(v * 255.0 + 0.5);
}

inline void save_ppm(const std::string& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot open for writing: " + path);
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<std::uint8_t> row(std::size_t(img.width) * 3);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) row[std::size_t(x) * 3 + c] = to_byte(img.at(c, y, x));
    out.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size()));
  }
  if (!out) throw data_error("write failed: " + path);
}

inline Image load_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open: " + path);
  auto next_token = [&]() -> std::string {
    std::string tok;
    int ch;
    while ((ch = in.get()) != EOF) {
      if (ch == '#') {
        while ((ch = in.get()) != EOF && ch != '\n') {}
        continue;
      }
      if (std::isspace(ch)) {
        if (!tok.empty()) break;
        continue;
      }
      tok.push_back(char(ch));
    }
    return tok;
  };
  if (next_token() != "P6") throw data_error("not a P6 PPM: " + path);
  int w = std::stoi(next_token());
  int h = std::stoi(next_token());
  int maxval = std::stoi(next_token());
  if (w <= 0 || h <= 0 || maxval != 255) throw data_error("unsupported PPM header: " + path);
  Image img(w, h);
  std::vector<std::uint8_t> row(std::size_t(w) * 3);
  for (int y = 0; y < h; ++y) {
    in.read(reinterpret_cast<char*>(row.data()), std::streamsize(row.size()));
    if (!in) throw data_error("truncated PPM: " + path);
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = row[std::size_t(x) * 3 + c] / 255.0;
  }
  return img;
}

// Flat binary array files: magic "ARRY", dtype byte (0 = uint8, 1 = float64),
// u32 height, u32 width (little-endian), then row-major samples.
namespace detail {
using binio::read_u32;
using binio::write_u32;
}  // namespace detail

inline void save_array_u8(const std::string& path, const std::vector<std::uint8_t>& data, int h,
                          int w) {
  if (int(data.size()) != h * w) throw data_error("array size mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot open for writing: " + path);
  out.write("ARRY", 4);
  out.put(0);
  detail::write_u32(out, std::uint32_t(h));
  detail::write_u32(out, std::uint32_t(w));
  out.write(reinterpret_cast<const char*>(data.data()), std::streamsize(data.size()));
}

inline void save_array_f64(const std::string& path, const std::vector<double>& data, int h, int w) {
  if (int(data.size()) != h * w) throw data_error("array size mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot open for writing: " + path);
  out.write("ARRY", 4);
  out.put(1);
  detail::write_u32(out, std::uint32_t(h));
  detail::write_u32(out, std::uint32_t(w));
  out.write(reinterpret_cast<const char*>(data.data()), std::streamsize(data.size() * 8));
}

inline std::vector<double> load_array_f64(const std::string& path, int& h, int& w) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open: " + path);
  char magic[4];
  in.read(magic, 4);
  if (std::memcmp(magic, "ARRY", 4) != 0) throw data_error("bad array magic: " + path);
  int dtype = in.get();
  h = int(detail::read_u32(in));
  w = int(detail::read_u32(in));
  std::vector<double> data(std::size_t(h) * w);
  if (dtype == 1) {
    in.read(reinterpret_cast<char*>(data.data()), std::streamsize(data.size() * 8));
  } else if (dtype == 0) {
    std::vector<std::uint8_t> raw(data.size());
    in.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size()));
    for (std::size_t i = 0; i < raw.size(); ++i) data[i] = double(raw[i]);
  } else {
    throw data_error("unknown array dtype: " + path);
  }
  if (!in) throw data_error("truncated array: " + path);
  return data;
}

}  // namespace pose6d
