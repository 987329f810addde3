#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "pose6d/binio.hpp"
#include "pose6d/errors.hpp"
#include "pose6d/random.hpp"
#include "pose6d/tensor.hpp"

namespace pose6d {

enum class LayerKind : std::uint8_t {
  Conv2d = 0,
  MaxPool2d = 1,
  Upsample2x = 2,
  FullyConnected = 3,
  Relu = 4,
  Sigmoid = 5,
};

struct Layer {
  LayerKind kind;
  // Conv2d: in_ch/out_ch/kernel/stride/pad. MaxPool2d: kernel (stride equals
  // kernel). FullyConnected: in_ch = flattened input size, out_ch = outputs.
  int in_ch = 0, out_ch = 0, kernel = 0, stride = 1, pad = 0;
  Tensor weight, bias;
  Tensor weight_grad, bias_grad;

  bool has_params() const {
    return kind == LayerKind::Conv2d || kind == LayerKind::FullyConnected;
  }
};

// Everything the backward pass needs from one forward pass: the input, every
// layer output, and max-pool winner indices. Keeping the trace outside the
// network lets one set of weights serve several concurrent passes (the
// embedding net runs on both crops before either backward).
struct Activations {
  std::vector<Tensor> value;  // value[0] is the input; value[i + 1] is layer i's output
  std::vector<std::vector<std::size_t>> pool_argmax;

  bool valid() const { return !value.empty(); }
};

namespace detail {

inline Tensor conv2d_forward(const Layer& l, const Tensor& x) {
  if (x.rank() != 3 || x.dim(0) != l.in_ch)
    throw config_error("conv2d input shape mismatch");
  int h = x.dim(1), w = x.dim(2), k = l.kernel;
  int oh = (h + 2 * l.pad - k) / l.stride + 1;
  int ow = (w + 2 * l.pad - k) / l.stride + 1;
  if (oh <= 0 || ow <= 0) throw config_error("conv2d kernel larger than padded input");
  Tensor out({l.out_ch, oh, ow});
  for (int oc = 0; oc < l.out_ch; ++oc)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        double acc = l.bias.at(oc);
        int base_y = oy * l.stride - l.pad;
        int base_x = ox * l.stride - l.pad;
        for (int ic = 0; ic < l.in_ch; ++ic)
          for (int ky = 0; ky < k; ++ky) {
            int iy = base_y + ky;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < k; ++kx) {
              int ix = base_x + kx;
              if (ix < 0 || ix >= w) continue;
              acc += l.weight.at(oc, ic, ky, kx) * x.at(ic, iy, ix);
            }
          }
        out.at(oc, oy, ox) = acc;
      }
  return out;
}

inline Tensor conv2d_backward(Layer& l, const Tensor& x, const Tensor& g) {
  int h = x.dim(1), w = x.dim(2), k = l.kernel;
  int oh = g.dim(1), ow = g.dim(2);
  Tensor dx(x.shape);
  for (int oc = 0; oc < l.out_ch; ++oc)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        double go = g.at(oc, oy, ox);
        if (go == 0.0) continue;
        l.bias_grad.at(oc) += go;
        int base_y = oy * l.stride - l.pad;
        int base_x = ox * l.stride - l.pad;
        for (int ic = 0; ic < l.in_ch; ++ic)
          for (int ky = 0; ky < k; ++ky) {
            int iy = base_y + ky;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < k; ++kx) {
              int ix = base_x + kx;
              if (ix < 0 || ix >= w) continue;
              l.weight_grad.at(oc, ic, ky, kx) += go * x.at(ic, iy, ix);
              dx.at(ic, iy, ix) += go * l.weight.at(oc, ic, ky, kx);
            }
          }
      }
  return dx;
}

inline Tensor maxpool_forward(const Layer& l, const Tensor& x, std::vector<std::size_t>& argmax) {
  if (x.rank() != 3) throw config_error("maxpool2d expects a (C,H,W) input");
  int c = x.dim(0), k = l.kernel;
  int oh = x.dim(1) / k, ow = x.dim(2) / k;
  if (oh <= 0 || ow <= 0) throw config_error("maxpool2d input smaller than window");
  Tensor out({c, oh, ow});
  argmax.assign(out.numel(), 0);
  std::size_t o = 0;
  for (int ch = 0; ch < c; ++ch)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox, ++o) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_idx = 0;
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) {
            int iy = oy * k + ky, ix = ox * k + kx;
            double v = x.at(ch, iy, ix);
            if (v > best) {  // ties keep the first in scan order
              best = v;
              best_idx = (std::size_t(ch) * x.dim(1) + iy) * x.dim(2) + ix;
            }
          }
        out.data[o] = best;
        argmax[o] = best_idx;
      }
  return out;
}

inline Tensor upsample2x_forward(const Tensor& x) {
  if (x.rank() != 3) throw config_error("upsample2x expects a (C,H,W) input");
  Tensor out({x.dim(0), x.dim(1) * 2, x.dim(2) * 2});
  for (int c = 0; c < x.dim(0); ++c)
    for (int y = 0; y < out.dim(1); ++y)
      for (int x2 = 0; x2 < out.dim(2); ++x2)
        out.at(c, y, x2) = x.at(c, y / 2, x2 / 2);
  return out;
}

}  // namespace detail

// A straight pipeline of layers. Branching graphs (detection heads, the
// attention fusion) are built by composing several networks and moving
// tensors between them by hand; concat_channels / split_channels carry the
// gradients across the seams.
class Network {
 public:
  std::vector<Layer>& layers() { return layers_; }
  const std::vector<Layer>& layers() const { return layers_; }

  Network& add_conv2d(int in_ch, int out_ch, int kernel, int stride = 1, int pad = 0) {
    if (in_ch <= 0 || out_ch <= 0 || kernel <= 0 || stride <= 0 || pad < 0)
      throw config_error("bad conv2d hyperparameters");
    Layer l;
    l.kind = LayerKind::Conv2d;
    l.in_ch = in_ch;
    l.out_ch = out_ch;
    l.kernel = kernel;
    l.stride = stride;
    l.pad = pad;
    l.weight = Tensor({out_ch, in_ch, kernel, kernel});
    l.bias = Tensor({out_ch});
    l.weight_grad = Tensor(l.weight.shape);
    l.bias_grad = Tensor(l.bias.shape);
    layers_.push_back(std::move(l));
    return *this;
  }

  Network& add_maxpool2d(int kernel) {
    if (kernel <= 0) throw config_error("bad maxpool2d kernel");
    Layer l;
    l.kind = LayerKind::MaxPool2d;
    l.kernel = kernel;
    layers_.push_back(std::move(l));
    return *this;
  }

  Network& add_upsample2x() {
    Layer l;
    l.kind = LayerKind::Upsample2x;
    layers_.push_back(std::move(l));
    return *this;
  }

  Network& add_fully_connected(int in_size, int out_size) {
    if (in_size <= 0 || out_size <= 0) throw config_error("bad fully_connected sizes");
    Layer l;
    l.kind = LayerKind::FullyConnected;
    l.in_ch = in_size;
    l.out_ch = out_size;
    l.weight = Tensor({out_size, in_size});
    l.bias = Tensor({out_size});
    l.weight_grad = Tensor(l.weight.shape);
    l.bias_grad = Tensor(l.bias.shape);
    layers_.push_back(std::move(l));
    return *this;
  }

  Network& add_relu() {
    Layer l;
    l.kind = LayerKind::Relu;
    layers_.push_back(std::move(l));
    return *this;
  }

  Network& add_sigmoid() {
    Layer l;
    l.kind = LayerKind::Sigmoid;
    layers_.push_back(std::move(l));
    return *this;
  }

  // He-style uniform init: limit = sqrt(6 / fan_in), biases zero.
  void init(Rng& rng) {
    for (auto& l : layers_) {
      if (!l.has_params()) continue;
      double fan_in = l.kind == LayerKind::Conv2d ? double(l.in_ch) * l.kernel * l.kernel
                                                  : double(l.in_ch);
      double limit = std::sqrt(6.0 / fan_in);
      for (double& w : l.weight.data) w = rng.uniform(-limit, limit);
      l.bias.fill(0.0);
    }
  }

  Tensor forward(const Tensor& input, Activations& acts) const {
    acts.value.clear();
    acts.pool_argmax.assign(layers_.size(), {});
    acts.value.reserve(layers_.size() + 1);
    acts.value.push_back(input);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const Layer& l = layers_[i];
      const Tensor& x = acts.value.back();
      Tensor y;
      switch (l.kind) {
        case LayerKind::Conv2d:
          y = detail::conv2d_forward(l, x);
          break;
        case LayerKind::MaxPool2d:
          y = detail::maxpool_forward(l, x, acts.pool_argmax[i]);
          break;
        case LayerKind::Upsample2x:
          y = detail::upsample2x_forward(x);
          break;
        case LayerKind::FullyConnected: {
          if (int(x.numel()) != l.in_ch)
            throw config_error("fully_connected input size mismatch");
          y = Tensor({l.out_ch});
          for (int o = 0; o < l.out_ch; ++o) {
            double acc = l.bias.at(o);
            const double* wrow = &l.weight.data[std::size_t(o) * l.in_ch];
            for (int ii = 0; ii < l.in_ch; ++ii) acc += wrow[ii] * x.data[ii];
            y.at(o) = acc;
          }
          break;
        }
        case LayerKind::Relu: {
          y = x;
          for (double& v : y.data) v = v > 0.0 ? v : 0.0;
          break;
        }
        case LayerKind::Sigmoid: {
          y = x;
          for (double& v : y.data)
            v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
          break;
        }
      }
      acts.value.push_back(std::move(y));
    }
    return acts.value.back();
  }

  Tensor forward(const Tensor& input) { return forward(input, trace_); }

  // Accumulates parameter gradients (callers zero_grad when starting a new
  // step) and returns the gradient at the input.
  Tensor backward(const Tensor& grad_out, const Activations& acts) {
    if (!acts.valid() || acts.value.size() != layers_.size() + 1)
      throw state_error("backward needs activations from a matching forward pass");
    Tensor g = grad_out;
    for (std::size_t ri = layers_.size(); ri-- > 0;) {
      Layer& l = layers_[ri];
      const Tensor& x = acts.value[ri];
      const Tensor& y = acts.value[ri + 1];
      if (!g.same_shape(y)) throw config_error("backward gradient shape mismatch");
      switch (l.kind) {
        case LayerKind::Conv2d:
          g = detail::conv2d_backward(l, x, g);
          break;
        case LayerKind::MaxPool2d: {
          Tensor dx(x.shape);
          const auto& arg = acts.pool_argmax[ri];
          for (std::size_t o = 0; o < g.numel(); ++o) dx.data[arg[o]] += g.data[o];
          g = std::move(dx);
          break;
        }
        case LayerKind::Upsample2x: {
          Tensor dx(x.shape);
          for (int c = 0; c < g.dim(0); ++c)
            for (int yy = 0; yy < g.dim(1); ++yy)
              for (int xx = 0; xx < g.dim(2); ++xx)
                dx.at(c, yy / 2, xx / 2) += g.at(c, yy, xx);
          g = std::move(dx);
          break;
        }
        case LayerKind::FullyConnected: {
          Tensor dx(x.shape);
          for (int o = 0; o < l.out_ch; ++o) {
            double go = g.at(o);
            l.bias_grad.at(o) += go;
            double* wg = &l.weight_grad.data[std::size_t(o) * l.in_ch];
            const double* wrow = &l.weight.data[std::size_t(o) * l.in_ch];
            for (int ii = 0; ii < l.in_ch; ++ii) {
              wg[ii] += go * x.data[ii];
              dx.data[ii] += go * wrow[ii];
            }
          }
          g = std::move(dx);
          break;
        }
        case LayerKind::Relu: {
          Tensor dx = g;
          for (std::size_t i = 0; i < dx.numel(); ++i)
            if (x.data[i] <= 0.0) dx.data[i] = 0.0;
          g = std::move(dx);
          break;
        }
        case LayerKind::Sigmoid: {
          Tensor dx = g;
          for (std::size_t i = 0; i < dx.numel(); ++i) dx.data[i] *= y.data[i] * (1.0 - y.data[i]);
          g = std::move(dx);
          break;
        }
      }
    }
    return g;
  }

  Tensor backward(const Tensor& grad_out) {
    if (!trace_.valid())
      throw state_error("backward called before forward on this network");
    return backward(grad_out, trace_);
  }

  void zero_grad() {
    for (auto& l : layers_) {
      if (!l.has_params()) continue;
      l.weight_grad.fill(0.0);
      l.bias_grad.fill(0.0);
    }
  }

  template <class F>
  void for_each_param(F fn) {
    for (auto& l : layers_) {
      if (!l.has_params()) continue;
      fn(l.weight, l.weight_grad);
      fn(l.bias, l.bias_grad);
    }
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_)
      if (l.has_params()) n += l.weight.numel() + l.bias.numel();
    return n;
  }

 private:
  std::vector<Layer> layers_;
  Activations trace_;
};

inline void write_network(std::ostream& out, const Network& net) {
  binio::write_tag(out, "P6NT");
  binio::write_u32(out, std::uint32_t(net.layers().size()));
  for (const auto& l : net.layers()) {
    out.put(char(l.kind));
    binio::write_i32(out, l.in_ch);
    binio::write_i32(out, l.out_ch);
    binio::write_i32(out, l.kernel);
    binio::write_i32(out, l.stride);
    binio::write_i32(out, l.pad);
    if (l.has_params()) {
      binio::write_f64_array(out, l.weight.data);
      binio::write_f64_array(out, l.bias.data);
    }
  }
}

inline Network read_network(std::istream& in) {
  binio::expect_tag(in, "P6NT", "network");
  std::uint32_t count = binio::read_u32(in);
  Network net;
  for (std::uint32_t i = 0; i < count; ++i) {
    int kind = in.get();
    if (kind < 0) throw data_error("truncated network stream");
    int in_ch = binio::read_i32(in);
    int out_ch = binio::read_i32(in);
    int kernel = binio::read_i32(in);
    int stride = binio::read_i32(in);
    int pad = binio::read_i32(in);
    switch (LayerKind(std::uint8_t(kind))) {
      case LayerKind::Conv2d:
        net.add_conv2d(in_ch, out_ch, kernel, stride, pad);
        break;
      case LayerKind::MaxPool2d:
        net.add_maxpool2d(kernel);
        break;
      case LayerKind::Upsample2x:
        net.add_upsample2x();
        break;
      case LayerKind::FullyConnected:
        net.add_fully_connected(in_ch, out_ch);
        break;
      case LayerKind::Relu:
        net.add_relu();
        break;
      case LayerKind::Sigmoid:
        net.add_sigmoid();
        break;
      default:
        throw data_error("unknown layer kind in network stream");
    }
    Layer& l = net.layers().back();
    if (l.has_params()) {
      std::vector<double> w = binio::read_f64_array(in);
      std::vector<double> b = binio::read_f64_array(in);
      if (w.size() != l.weight.numel() || b.size() != l.bias.numel())
        throw data_error("network parameter size mismatch");
      l.weight.data = std::move(w);
      l.bias.data = std::move(b);
    }
  }
  return net;
}

inline void save_network(const std::string& path, const Network& net) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot open for writing: " + path);
  write_network(out, net);
}

inline Network load_network(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open: " + path);
  return read_network(in);
}

inline bool same_architecture(const Network& a, const Network& b) {
  if (a.layers().size() != b.layers().size()) return false;
  for (std::size_t i = 0; i < a.layers().size(); ++i) {
    const Layer &la = a.layers()[i], &lb = b.layers()[i];
    if (la.kind != lb.kind || la.in_ch != lb.in_ch || la.out_ch != lb.out_ch ||
        la.kernel != lb.kernel || la.stride != lb.stride || la.pad != lb.pad)
      return false;
  }
  return true;
}

// Central-difference gradient of a scalar function with respect to the values
// in `t`; the mutation is undone before returning. Backs the gradient checks.
template <class F>
inline std::vector<double> numeric_gradient(Tensor& t, F scalar_fn, double eps = 1e-5) {
  std::vector<double> grad(t.numel());
  for (std::size_t i = 0; i < t.numel(); ++i) {
    double saved = t.data[i];
    t.data[i] = saved + eps;
    double up = scalar_fn();
    t.data[i] = saved - eps;
    double down = scalar_fn();
    t.data[i] = saved;
    grad[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw config_error("gradient size mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace pose6d
