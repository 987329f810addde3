#pragma once

#include <cmath>

#include "pose6d/errors.hpp"
#include "pose6d/tensor.hpp"

namespace pose6d {

// Warps render-side features onto the image grid: out(c, y, x) samples
// features at (x + flow_u(y,x), y + flow_v(y,x)) with bilinear weights.
// Samples whose neighbors fall outside the map read zero, so the warp is
// everywhere defined and piecewise differentiable.
//
// `flow` is (2, H, W): channel 0 horizontal, channel 1 vertical, in pixels.

namespace detail {

struct BilinearTaps {
  int x0, y0;
  double fx, fy;
};

inline BilinearTaps taps_at(double sx, double sy) {
  double fx0 = std::floor(sx), fy0 = std::floor(sy);
  return {int(fx0), int(fy0), sx - fx0, sy - fy0};
}

inline double tap_read(const Tensor& f, int c, int y, int x) {
  if (x < 0 || x >= f.dim(2) || y < 0 || y >= f.dim(1)) return 0.0;
  return f.at(c, y, x);
}

}  // namespace detail

inline Tensor bilinear_warp(const Tensor& features, const Tensor& flow) {
  if (features.rank() != 3) throw config_error("bilinear_warp expects (C,H,W) features");
  if (flow.rank() != 3 || flow.dim(0) != 2 || flow.dim(1) != features.dim(1) ||
      flow.dim(2) != features.dim(2))
    throw config_error("bilinear_warp flow must be (2,H,W) matching the features");
  int c_n = features.dim(0), h = features.dim(1), w = features.dim(2);
  Tensor out(features.shape);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      auto t = detail::taps_at(x + flow.at(0, y, x), y + flow.at(1, y, x));
      double w00 = (1.0 - t.fx) * (1.0 - t.fy), w10 = t.fx * (1.0 - t.fy);
      double w01 = (1.0 - t.fx) * t.fy, w11 = t.fx * t.fy;
      for (int c = 0; c < c_n; ++c)
        out.at(c, y, x) = w00 * detail::tap_read(features, c, t.y0, t.x0) +
                          w10 * detail::tap_read(features, c, t.y0, t.x0 + 1) +
                          w01 * detail::tap_read(features, c, t.y0 + 1, t.x0) +
                          w11 * detail::tap_read(features, c, t.y0 + 1, t.x0 + 1);
    }
  return out;
}

struct WarpGrads {
  Tensor features;  // same shape as the feature input
  Tensor flow;      // (2, H, W)
};

inline WarpGrads bilinear_warp_backward(const Tensor& features, const Tensor& flow,
                                        const Tensor& grad_out) {
  if (!grad_out.same_shape(features))
    throw config_error("bilinear_warp_backward gradient shape mismatch");
  int c_n = features.dim(0), h = features.dim(1), w = features.dim(2);
  WarpGrads g{Tensor(features.shape), Tensor(flow.shape)};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      auto t = detail::taps_at(x + flow.at(0, y, x), y + flow.at(1, y, x));
      double w00 = (1.0 - t.fx) * (1.0 - t.fy), w10 = t.fx * (1.0 - t.fy);
      double w01 = (1.0 - t.fx) * t.fy, w11 = t.fx * t.fy;
      double du = 0.0, dv = 0.0;
      for (int c = 0; c < c_n; ++c) {
        double go = grad_out.at(c, y, x);
        if (go == 0.0) continue;
        double f00 = detail::tap_read(features, c, t.y0, t.x0);
        double f10 = detail::tap_read(features, c, t.y0, t.x0 + 1);
        double f01 = detail::tap_read(features, c, t.y0 + 1, t.x0);
        double f11 = detail::tap_read(features, c, t.y0 + 1, t.x0 + 1);
        // scatter to the in-bounds taps
        auto add = [&](int yy, int xx, double weight) {
          if (xx < 0 || xx >= w || yy < 0 || yy >= h) return;
          g.features.at(c, yy, xx) += go * weight;
        };
        add(t.y0, t.x0, w00);
        add(t.y0, t.x0 + 1, w10);
        add(t.y0 + 1, t.x0, w01);
        add(t.y0 + 1, t.x0 + 1, w11);
        // sample-position derivative of the bilinear blend
        du += go * ((1.0 - t.fy) * (f10 - f00) + t.fy * (f11 - f01));
        dv += go * ((1.0 - t.fx) * (f01 - f00) + t.fx * (f11 - f10));
      }
      g.flow.at(0, y, x) = du;
      g.flow.at(1, y, x) = dv;
    }
  return g;
}

}  // namespace pose6d
