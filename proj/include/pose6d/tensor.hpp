#pragma once

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "pose6d/errors.hpp"

namespace pose6d {

// Dense row-major tensor of doubles. Feature maps are (channels, height,
// width); vectors are (n). Nothing here owns semantics beyond the shape.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(numel_of(shape), 0.0);
  }
  Tensor(std::initializer_list<int> s) : Tensor(std::vector<int>(s)) {}

  static std::size_t numel_of(const std::vector<int>& s) {
    std::size_t n = 1;
    for (int d : s) {
      if (d <= 0) throw config_error("tensor dimensions must be positive");
      n *= std::size_t(d);
    }
    return n;
  }

  std::size_t numel() const { return data.size(); }
  int rank() const { return int(shape.size()); }
  int dim(int i) const { return shape[std::size_t(i)]; }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  double& at(int i) { return data[std::size_t(i)]; }
  double at(int i) const { return data[std::size_t(i)]; }
  double& at(int c, int y, int x) {
    return data[(std::size_t(c) * shape[1] + y) * shape[2] + x];
  }
  double at(int c, int y, int x) const {
    return data[(std::size_t(c) * shape[1] + y) * shape[2] + x];
  }
  double& at(int a, int b, int c, int d) {
    return data[((std::size_t(a) * shape[1] + b) * std::size_t(shape[2]) + c) * shape[3] + d];
  }
  double at(int a, int b, int c, int d) const {
    return data[((std::size_t(a) * shape[1] + b) * std::size_t(shape[2]) + c) * shape[3] + d];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  Tensor& operator+=(const Tensor& o) {
    if (!same_shape(o)) throw config_error("tensor shape mismatch in +=");
    for (std::size_t i = 0; i < data.size(); ++i) data[i] += o.data[i];
    return *this;
  }
  Tensor& operator*=(double s) {
    for (double& v : data) v *= s;
    return *this;
  }

  void fill(double v) { std::fill(data.begin(), data.end(), v); }

  /// Same data reinterpreted under a new shape with equal element count.
  Tensor reshaped(std::vector<int> s) const {
    if (numel_of(s) != data.size()) throw config_error("reshape changes element count");
    Tensor t;
    t.shape = std::move(s);
    t.data = data;
    return t;
  }
};

/// Stacks (C_i, H, W) maps along the channel axis.
inline Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw config_error("concat_channels needs at least one input");
  int h = parts[0].dim(1), w = parts[0].dim(2), c_total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 3 || p.dim(1) != h || p.dim(2) != w)
      throw config_error("concat_channels inputs must share height and width");
    c_total += p.dim(0);
  }
  Tensor out({c_total, h, w});
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.data.begin(), p.data.end(), out.data.begin() + offset);
    offset += p.numel();
  }
  return out;
}

/// Inverse of concat_channels for a given channel split.
inline std::vector<Tensor> split_channels(const Tensor& t, const std::vector<int>& channels) {
  if (t.rank() != 3) throw config_error("split_channels expects a (C,H,W) tensor");
  int sum = std::accumulate(channels.begin(), channels.end(), 0);
  if (sum != t.dim(0)) throw config_error("split_channels sizes do not sum to channel count");
  std::vector<Tensor> parts;
  std::size_t offset = 0;
  for (int c : channels) {
    Tensor p({c, t.dim(1), t.dim(2)});
    std::copy(t.data.begin() + offset, t.data.begin() + offset + p.numel(), p.data.begin());
    offset += p.numel();
    parts.push_back(std::move(p));
  }
  return parts;
}

}  // namespace pose6d
