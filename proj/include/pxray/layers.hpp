#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <variant>
#include <vector>

#include "pxray/errors.hpp"
#include "pxray/tensor.hpp"

namespace pxray {

/// Fully connected layer, weights laid out [in, out].
struct Dense {
  Tensor weights;
  Tensor bias;

  std::size_t in_dim() const { return weights.dim(0); }
  std::size_t out_dim() const { return weights.dim(1); }
  double w(std::size_t i, std::size_t j) const { return weights[i * out_dim() + j]; }

  friend bool operator==(const Dense&, const Dense&) = default;
};

enum class Padding { valid, same };

/// 2-D cross-correlation, kernels laid out [kh, kw, cin, cout].
struct Conv2D {
  Tensor kernels;
  Tensor bias;
  std::size_t stride = 1;
  Padding padding = Padding::valid;

  std::size_t kh() const { return kernels.dim(0); }
  std::size_t kw() const { return kernels.dim(1); }
  std::size_t cin() const { return kernels.dim(2); }
  std::size_t cout() const { return kernels.dim(3); }
  double k(std::size_t ky, std::size_t kx, std::size_t ci, std::size_t co) const {
    return kernels[((ky * kw() + kx) * cin() + ci) * cout() + co];
  }

  friend bool operator==(const Conv2D&, const Conv2D&) = default;
};

struct ReLU {
  friend bool operator==(const ReLU&, const ReLU&) = default;
};

/// Maps an (rows, cols, channels) map to one expected (x, y) coordinate per
/// channel. Output is interleaved: [x_0, y_0, x_1, y_1, ...].
struct SpatialSoftmax {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t channels = 0;

  std::size_t out_dim() const { return 2 * channels; }

  friend bool operator==(const SpatialSoftmax&, const SpatialSoftmax&) = default;
};

/// Joins the feature points and the configuration vector.
struct Concat {
  std::vector<std::size_t> segment_dims;

  std::size_t out_dim() const {
    std::size_t n = 0;
    for (auto d : segment_dims) n += d;
    return n;
  }
  std::size_t offset(std::size_t segment) const {
    std::size_t n = 0;
    for (std::size_t s = 0; s < segment; ++s) n += segment_dims[s];
    return n;
  }
};

using Layer = std::variant<Dense, Conv2D, ReLU, SpatialSoftmax>;

inline const char* layer_type_name(const Layer& layer) {
  struct Visitor {
    const char* operator()(const Dense&) const { return "dense"; }
    const char* operator()(const Conv2D&) const { return "conv2d"; }
    const char* operator()(const ReLU&) const { return "relu"; }
    const char* operator()(const SpatialSoftmax&) const { return "spatial_softmax"; }
  };
  return std::visit(Visitor{}, layer);
}

// ---------------------------------------------------------------------------
// Dense

inline Tensor dense_forward(const Dense& layer, const Tensor& x) {
  if (x.size() != layer.in_dim() || layer.bias.size() != layer.out_dim()) {
    throw ShapeError("dense_forward: input of size " + std::to_string(x.size()) +
                     " into layer " + shape_str(layer.weights.shape()));
  }
  const std::size_t n_in = layer.in_dim();
  const std::size_t n_out = layer.out_dim();
  Tensor y({n_out});
  for (std::size_t j = 0; j < n_out; ++j) y[j] = layer.bias[j];
  for (std::size_t i = 0; i < n_in; ++i) {
    const double xi = x[i];
    const double* row = &layer.weights.data()[i * n_out];
    for (std::size_t j = 0; j < n_out; ++j) y[j] += xi * row[j];
  }
  return y;
}

/// Input gradient of a dense layer; accumulates parameter gradients when the
/// targets are non-null.
inline Tensor dense_backward(const Dense& layer, const Tensor& x, const Tensor& dy,
                             Tensor* dweights = nullptr, Tensor* dbias = nullptr) {
  const std::size_t n_in = layer.in_dim();
  const std::size_t n_out = layer.out_dim();
  Tensor dx({n_in});
  for (std::size_t i = 0; i < n_in; ++i) {
    const double* row = &layer.weights.data()[i * n_out];
    double acc = 0.0;
    for (std::size_t j = 0; j < n_out; ++j) acc += row[j] * dy[j];
    dx[i] = acc;
  }
  if (dweights) {
    for (std::size_t i = 0; i < n_in; ++i) {
      const double xi = x[i];
      if (xi == 0.0) continue;
      double* row = &dweights->data()[i * n_out];
      for (std::size_t j = 0; j < n_out; ++j) row[j] += xi * dy[j];
    }
  }
  if (dbias) {
    for (std::size_t j = 0; j < n_out; ++j) (*dbias)[j] += dy[j];
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Conv2D

struct ConvGeometry {
  std::size_t in_h, in_w, out_h, out_w;
  std::size_t pad_top, pad_left;
};

inline ConvGeometry conv_geometry(const Conv2D& layer, const Shape& in_shape) {
  if (in_shape.size() != 3 || in_shape[2] != layer.cin()) {
    throw ShapeError("conv2d: input " + shape_str(in_shape) + " does not match kernel " +
                     shape_str(layer.kernels.shape()));
  }
  if (layer.stride == 0) throw ShapeError("conv2d: stride must be >= 1");
  ConvGeometry g{in_shape[0], in_shape[1], 0, 0, 0, 0};
  const std::size_t s = layer.stride;
  if (layer.padding == Padding::valid) {
    if (layer.kh() > g.in_h || layer.kw() > g.in_w) {
      throw ShapeError("conv2d: kernel " + shape_str(layer.kernels.shape()) +
                       " larger than input " + shape_str(in_shape));
    }
    g.out_h = (g.in_h - layer.kh()) / s + 1;
    g.out_w = (g.in_w - layer.kw()) / s + 1;
  } else {
    g.out_h = (g.in_h + s - 1) / s;
    g.out_w = (g.in_w + s - 1) / s;
    const std::size_t need_h = (g.out_h - 1) * s + layer.kh();
    const std::size_t need_w = (g.out_w - 1) * s + layer.kw();
    g.pad_top = need_h > g.in_h ? (need_h - g.in_h) / 2 : 0;
    g.pad_left = need_w > g.in_w ? (need_w - g.in_w) / 2 : 0;
  }
  return g;
}

/// Calls fn(out_index, in_index, kernel_index) for every multiply in the
/// convolution. Padding positions are skipped.
template <typename Fn>
void for_each_conv_tap(const Conv2D& layer, const ConvGeometry& g, Fn&& fn) {
  const std::size_t cin = layer.cin();
  const std::size_t cout = layer.cout();
  for (std::size_t oy = 0; oy < g.out_h; ++oy) {
    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
      const std::size_t out_base = (oy * g.out_w + ox) * cout;
      for (std::size_t ky = 0; ky < layer.kh(); ++ky) {
        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * layer.stride + ky) -
                                  static_cast<std::ptrdiff_t>(g.pad_top);
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
        for (std::size_t kx = 0; kx < layer.kw(); ++kx) {
          const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * layer.stride + kx) -
                                    static_cast<std::ptrdiff_t>(g.pad_left);
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
          const std::size_t in_base =
              (static_cast<std::size_t>(iy) * g.in_w + static_cast<std::size_t>(ix)) * cin;
          const std::size_t k_base = (ky * layer.kw() + kx) * cin * cout;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            fn(out_base, in_base + ci, k_base + ci * cout);
          }
        }
      }
    }
  }
}

inline Tensor conv2d_forward(const Conv2D& layer, const Tensor& x) {
  const ConvGeometry g = conv_geometry(layer, x.shape());
  const std::size_t cout = layer.cout();
  Tensor y({g.out_h, g.out_w, cout});
  double* out = y.data().data();
  for (std::size_t p = 0; p < g.out_h * g.out_w; ++p)
    for (std::size_t co = 0; co < cout; ++co) out[p * cout + co] = layer.bias[co];
  const double* in = x.data().data();
  const double* k = layer.kernels.data().data();
  for_each_conv_tap(layer, g, [&](std::size_t ob, std::size_t ii, std::size_t kb) {
    const double xv = in[ii];
    for (std::size_t co = 0; co < cout; ++co) out[ob + co] += xv * k[kb + co];
  });
  return y;
}

inline Tensor conv2d_backward(const Conv2D& layer, const Tensor& x, const Tensor& dy,
                              Tensor* dkernels = nullptr, Tensor* dbias = nullptr) {
  const ConvGeometry g = conv_geometry(layer, x.shape());
  const std::size_t cout = layer.cout();
  Tensor dx(x.shape());
  double* dxp = dx.data().data();
  const double* dyp = dy.data().data();
  const double* in = x.data().data();
  const double* k = layer.kernels.data().data();
  double* dk = dkernels ? dkernels->data().data() : nullptr;
  for_each_conv_tap(layer, g, [&](std::size_t ob, std::size_t ii, std::size_t kb) {
    double acc = 0.0;
    for (std::size_t co = 0; co < cout; ++co) acc += k[kb + co] * dyp[ob + co];
    dxp[ii] += acc;
    if (dk) {
      const double xv = in[ii];
      for (std::size_t co = 0; co < cout; ++co) dk[kb + co] += xv * dyp[ob + co];
    }
  });
  if (dbias) {
    for (std::size_t p = 0; p < g.out_h * g.out_w; ++p)
      for (std::size_t co = 0; co < cout; ++co) (*dbias)[co] += dyp[p * cout + co];
  }
  return dx;
}

// ---------------------------------------------------------------------------
// ReLU

inline Tensor relu_forward(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.data()) v = v > 0.0 ? v : 0.0;
  return y;
}

inline Tensor relu_backward(const Tensor& x_pre, const Tensor& dy) {
  Tensor dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i)
    if (!(x_pre[i] > 0.0)) dx[i] = 0.0;
  return dx;
}

/// Guided variant: also zeroes negative incoming gradient.
inline Tensor relu_backward_guided(const Tensor& x_pre, const Tensor& dy) {
  Tensor dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i)
    if (!(x_pre[i] > 0.0) || !(dy[i] > 0.0)) dx[i] = 0.0;
  return dx;
}

// ---------------------------------------------------------------------------
// SpatialSoftmax

/// Pixel coordinate on a [-1, 1] grid; a single row or column maps to 0.
inline double grid_coord(std::size_t index, std::size_t extent) {
  if (extent <= 1) return 0.0;
  return -1.0 + 2.0 * static_cast<double>(index) / static_cast<double>(extent - 1);
}

/// Per-channel softmax over all pixels, returned in the input's layout.
inline Tensor spatial_softmax_weights(const SpatialSoftmax& layer, const Tensor& x) {
  if (x.rank() != 3 || x.dim(0) != layer.rows || x.dim(1) != layer.cols ||
      x.dim(2) != layer.channels) {
    throw ShapeError("spatial_softmax: input " + shape_str(x.shape()) + " expected [" +
                     std::to_string(layer.rows) + "," + std::to_string(layer.cols) + "," +
                     std::to_string(layer.channels) + "]");
  }
  const std::size_t n = layer.rows * layer.cols;
  const std::size_t c_n = layer.channels;
  Tensor s(x.shape());
  for (std::size_t c = 0; c < c_n; ++c) {
    double mx = x[c];
    for (std::size_t p = 1; p < n; ++p) mx = std::max(mx, x[p * c_n + c]);
    double z = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      const double e = std::exp(x[p * c_n + c] - mx);
      s[p * c_n + c] = e;
      z += e;
    }
    for (std::size_t p = 0; p < n; ++p) s[p * c_n + c] /= z;
  }
  return s;
}

inline Tensor spatial_softmax_forward(const SpatialSoftmax& layer, const Tensor& x) {
  const Tensor s = spatial_softmax_weights(layer, x);
  const std::size_t c_n = layer.channels;
  Tensor out({layer.out_dim()});
  for (std::size_t r = 0; r < layer.rows; ++r) {
    const double py = grid_coord(r, layer.rows);
    for (std::size_t col = 0; col < layer.cols; ++col) {
      const double px = grid_coord(col, layer.cols);
      const std::size_t p = r * layer.cols + col;
      for (std::size_t c = 0; c < c_n; ++c) {
        out[2 * c] += s[p * c_n + c] * px;
        out[2 * c + 1] += s[p * c_n + c] * py;
      }
    }
  }
  return out;
}

/// d(feature points)/d(map) applied to dy: s_p * ((px_p - X) dX + (py_p - Y) dY).
inline Tensor spatial_softmax_backward(const SpatialSoftmax& layer, const Tensor& x,
                                       const Tensor& dy) {
  const Tensor s = spatial_softmax_weights(layer, x);
  const Tensor points = spatial_softmax_forward(layer, x);
  const std::size_t c_n = layer.channels;
  Tensor dx(x.shape());
  for (std::size_t r = 0; r < layer.rows; ++r) {
    const double py = grid_coord(r, layer.rows);
    for (std::size_t col = 0; col < layer.cols; ++col) {
      const double px = grid_coord(col, layer.cols);
      const std::size_t p = r * layer.cols + col;
      for (std::size_t c = 0; c < c_n; ++c) {
        dx[p * c_n + c] = s[p * c_n + c] * ((px - points[2 * c]) * dy[2 * c] +
                                            (py - points[2 * c + 1]) * dy[2 * c + 1]);
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Generic dispatch

/// Output shape of `layer` applied to an input of `in_shape`.
inline Shape layer_output_shape(const Layer& layer, const Shape& in_shape) {
  if (const auto* d = std::get_if<Dense>(&layer)) {
    if (shape_size(in_shape) != d->in_dim())
      throw ShapeError("dense: input " + shape_str(in_shape) + " vs in_dim " +
                       std::to_string(d->in_dim()));
    return {d->out_dim()};
  }
  if (const auto* c = std::get_if<Conv2D>(&layer)) {
    const ConvGeometry g = conv_geometry(*c, in_shape);
    return {g.out_h, g.out_w, c->cout()};
  }
  if (const auto* s = std::get_if<SpatialSoftmax>(&layer)) {
    if (in_shape != Shape{s->rows, s->cols, s->channels})
      throw ShapeError("spatial_softmax: input " + shape_str(in_shape) + " does not match layer");
    return {s->out_dim()};
  }
  return in_shape;
}

inline Tensor layer_forward(const Layer& layer, const Tensor& x) {
  struct Visitor {
    const Tensor& x;
    Tensor operator()(const Dense& l) const { return dense_forward(l, x); }
    Tensor operator()(const Conv2D& l) const { return conv2d_forward(l, x); }
    Tensor operator()(const ReLU&) const { return relu_forward(x); }
    Tensor operator()(const SpatialSoftmax& l) const { return spatial_softmax_forward(l, x); }
  };
  return std::visit(Visitor{x}, layer);
}

}  // namespace pxray
