#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "pxray/errors.hpp"
#include "pxray/kinematics.hpp"
#include "pxray/layers.hpp"
#include "pxray/network.hpp"
#include "pxray/tensor.hpp"

namespace pxray {

enum class Method { dtd, rap, gbp };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::dtd: return "dtd";
    case Method::rap: return "rap";
    case Method::gbp: return "gbp";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  if (s == "dtd") return Method::dtd;
  if (s == "rap") return Method::rap;
  if (s == "gbp") return Method::gbp;
  throw ConfigError("unknown method '" + s + "' (valid: dtd, rap, gbp)");
}

/// Relevance that could not be redistributed because a denominator was zero.
struct DropCounter {
  double mass = 0.0;
  std::size_t count = 0;
  /// Output columns whose bias-free pre-activation sign disagreed with the
  /// incoming relevance sign (only possible through a large bias).
  std::size_t sign_mismatches = 0;

  void drop(double r) {
    if (r == 0.0) return;
    mass += r;
    ++count;
  }
};

struct AttributionResult {
  Method method = Method::dtd;
  Tensor image_relevance;
  Tensor config_relevance;
  /// Signed sum per group, plus "image".
  std::map<std::string, double> group_totals;
  /// Sum of |R| per group, plus "image".
  std::map<std::string, double> group_abs_totals;
  double output_total = 0.0;  // sum_j alpha_j |tau_j|
  DropCounter drops;
  /// Relevance total after each backward step, output side first.
  std::vector<double> layer_totals;
  Tensor torques;

  double input_total() const { return image_relevance.sum() + config_relevance.sum(); }
};

// ---------------------------------------------------------------------------
// Output initialization

inline Tensor init_output_relevance(const Tensor& torques, const ImportanceFactors& alpha) {
  if (torques.size() != alpha.size())
    throw ShapeError("init_output_relevance: " + std::to_string(torques.size()) + " torques, " +
                     std::to_string(alpha.size()) + " importance factors");
  Tensor r({torques.size()});
  for (std::size_t j = 0; j < torques.size(); ++j) r[j] = alpha[j] * torques[j];
  return r;
}

// ---------------------------------------------------------------------------
// Per-connection contributions

enum class Contribution {
  zplus,         // x * max(w, 0); inputs must be non-negative
  signed_input,  // z+ for positive inputs, z- for negative inputs
  z,             // x * w, both signs (used by RAP)
};

inline double contribution(Contribution rule, double x, double w) {
  switch (rule) {
    case Contribution::zplus: return x * std::max(w, 0.0);
    case Contribution::signed_input:
      if (x > 0.0) return x * std::max(w, 0.0);
      if (x < 0.0) return x * std::min(w, 0.0);
      return 0.0;
    case Contribution::z: return x * w;
  }
  return 0.0;
}

namespace detail {

inline void require_non_negative(const Tensor& x, const char* what) {
  for (double v : x.data())
    if (v < 0.0)
      throw ContractViolation(std::string(what) +
                              ": negative input; use propagate_input_layer for signed inputs");
}

inline void require_dense_dims(const Dense& d, const Tensor& x, const Tensor& r, const char* what) {
  if (x.size() != d.in_dim() || r.size() != d.out_dim())
    throw ShapeError(std::string(what) + ": x has " + std::to_string(x.size()) + ", R has " +
                     std::to_string(r.size()) + " for layer " + shape_str(d.weights.shape()));
}

/// R_i = sum_j c_ij / (sum_i' c_i'j) * R_j over a dense layer.
inline Tensor dense_fraction_rule(const Dense& d, const Tensor& x, const Tensor& r_out,
                                  Contribution rule, DropCounter& drops) {
  const std::size_t n_in = d.in_dim();
  const std::size_t n_out = d.out_dim();
  Tensor r_in({n_in});
  std::vector<double> c(n_in);
  for (std::size_t j = 0; j < n_out; ++j) {
    double den = 0.0;
    for (std::size_t i = 0; i < n_in; ++i) {
      c[i] = contribution(rule, x[i], d.w(i, j));
      den += c[i];
    }
    if (den == 0.0) {
      drops.drop(r_out[j]);
      continue;
    }
    const double rj = r_out[j];
    for (std::size_t i = 0; i < n_in; ++i) r_in[i] += c[i] / den * rj;
  }
  return r_in;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dense rules

/// z+-rule for hidden layers whose inputs are post-ReLU activations.
inline Tensor propagate_dense_zplus(const Dense& d, const Tensor& x, const Tensor& r_out,
                                   DropCounter& drops) {
  detail::require_dense_dims(d, x, r_out, "propagate_dense_zplus");
  detail::require_non_negative(x, "propagate_dense_zplus");
  return detail::dense_fraction_rule(d, x, r_out, Contribution::zplus, drops);
}

/// Rule for a layer whose inputs may be negative: a negative input and its
/// weights are sign-flipped, so it draws relevance through its z- terms.
inline Tensor propagate_input_layer(const Dense& d, const Tensor& x, const Tensor& r_out,
                                    DropCounter& drops) {
  detail::require_dense_dims(d, x, r_out, "propagate_input_layer");
  return detail::dense_fraction_rule(d, x, r_out, Contribution::signed_input, drops);
}

/// Output-layer rule. Each column is routed by the sign of its bias-free
/// pre-activation: positive columns through z+ fractions, negative columns
/// through z- fractions with the weights sign-flipped, so both carry |R_j|.
/// A zero pre-activation drops the column. With `signed_inputs`, negative
/// inputs are handled as in propagate_input_layer.
inline Tensor propagate_output_layer(const Dense& d, const Tensor& x, const Tensor& r_out,
                                     DropCounter& drops, bool signed_inputs = false) {
  detail::require_dense_dims(d, x, r_out, "propagate_output_layer");
  if (!signed_inputs) detail::require_non_negative(x, "propagate_output_layer");
  const Contribution rule = signed_inputs ? Contribution::signed_input : Contribution::zplus;
  const std::size_t n_in = d.in_dim();
  const std::size_t n_out = d.out_dim();
  Tensor r_in({n_in});
  std::vector<double> c(n_in);
  for (std::size_t j = 0; j < n_out; ++j) {
    const double rj = r_out[j];
    double pre = 0.0;
    for (std::size_t i = 0; i < n_in; ++i) pre += x[i] * d.w(i, j);
    if (pre == 0.0) {
      drops.drop(std::abs(rj));
      continue;
    }
    const double flip = pre > 0.0 ? 1.0 : -1.0;
    if (rj * flip < 0.0) ++drops.sign_mismatches;
    double den = 0.0;
    for (std::size_t i = 0; i < n_in; ++i) {
      c[i] = contribution(rule, x[i], flip * d.w(i, j));
      den += c[i];
    }
    if (den == 0.0) {
      drops.drop(std::abs(rj));
      continue;
    }
    const double mag = std::abs(rj);
    for (std::size_t i = 0; i < n_in; ++i) r_in[i] += c[i] / den * mag;
  }
  return r_in;
}

/// Relevance is unchanged by a ReLU. In strict mode, relevance sitting on an
/// inactive unit is a contract violation.
inline Tensor propagate_relu(const Tensor& x_pre, const Tensor& r_out, bool strict = true) {
  x_pre.require_same_shape(r_out, "propagate_relu");
  if (strict) {
    for (std::size_t i = 0; i < r_out.size(); ++i)
      if (!(x_pre[i] > 0.0) && r_out[i] != 0.0)
        throw ContractViolation("propagate_relu: relevance " + std::to_string(r_out[i]) +
                                " on inactive unit " + std::to_string(i));
  }
  return r_out;
}

// ---------------------------------------------------------------------------
// Spatial softmax

inline constexpr double kSpatialSoftmaxEps = 1e-3;

/// Spreads each channel's feature-point relevance R(x_c) + R(y_c) over its
/// pixels with weights s_p * (|px_p| + |py_p| + eps), normalized per channel.
inline Tensor propagate_spatial_softmax(const SpatialSoftmax& layer, const Tensor& x,
                                        const Tensor& r_points, double eps = kSpatialSoftmaxEps) {
  if (r_points.size() != layer.out_dim())
    throw ShapeError("propagate_spatial_softmax: R has " + std::to_string(r_points.size()) +
                     " entries, expected " + std::to_string(layer.out_dim()));
  const Tensor s = spatial_softmax_weights(layer, x);
  const std::size_t c_n = layer.channels;
  Tensor weight(x.shape());
  std::vector<double> norm(c_n, 0.0);
  for (std::size_t r = 0; r < layer.rows; ++r) {
    const double py = grid_coord(r, layer.rows);
    for (std::size_t col = 0; col < layer.cols; ++col) {
      const double px = grid_coord(col, layer.cols);
      const std::size_t p = r * layer.cols + col;
      for (std::size_t c = 0; c < c_n; ++c) {
        const double w = s[p * c_n + c] * (std::abs(px) + std::abs(py) + eps);
        weight[p * c_n + c] = w;
        norm[c] += w;
      }
    }
  }
  Tensor out(x.shape());
  for (std::size_t p = 0; p < layer.rows * layer.cols; ++p) {
    for (std::size_t c = 0; c < c_n; ++c) {
      const double rc = r_points[2 * c] + r_points[2 * c + 1];
      out[p * c_n + c] = weight[p * c_n + c] / norm[c] * rc;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution

/// Fraction rule over a convolution, treated as the sparse linear map it is.
inline Tensor propagate_conv(const Conv2D& layer, const Tensor& x, const Tensor& r_out,
                             Contribution rule, DropCounter& drops) {
  const ConvGeometry g = conv_geometry(layer, x.shape());
  if (r_out.shape() != Shape{g.out_h, g.out_w, layer.cout()})
    throw ShapeError("propagate_conv: R shape " + shape_str(r_out.shape()));
  if (rule == Contribution::zplus) detail::require_non_negative(x, "propagate_conv_zplus");
  const std::size_t cout = layer.cout();
  const double* in = x.data().data();
  const double* k = layer.kernels.data().data();
  Tensor den(r_out.shape());
  double* dp = den.data().data();
  for_each_conv_tap(layer, g, [&](std::size_t ob, std::size_t ii, std::size_t kb) {
    for (std::size_t co = 0; co < cout; ++co) dp[ob + co] += contribution(rule, in[ii], k[kb + co]);
  });
  Tensor ratio(r_out.shape());
  for (std::size_t o = 0; o < r_out.size(); ++o) {
    if (dp[o] == 0.0) {
      drops.drop(r_out[o]);
    } else {
      ratio[o] = r_out[o] / dp[o];
    }
  }
  Tensor r_in(x.shape());
  double* rp = r_in.data().data();
  const double* q = ratio.data().data();
  for_each_conv_tap(layer, g, [&](std::size_t ob, std::size_t ii, std::size_t kb) {
    double acc = 0.0;
    for (std::size_t co = 0; co < cout; ++co)
      acc += contribution(rule, in[ii], k[kb + co]) * q[ob + co];
    rp[ii] += acc;
  });
  return r_in;
}

inline Tensor propagate_conv_zplus(const Conv2D& layer, const Tensor& x, const Tensor& r_out,
                                   DropCounter& drops) {
  return propagate_conv(layer, x, r_out, Contribution::zplus, drops);
}

// ---------------------------------------------------------------------------
// Full-network attribution

namespace detail {

inline bool has_negative(const Tensor& x) {
  return std::any_of(x.data().begin(), x.data().end(), [](double v) { return v < 0.0; });
}

inline void require_alpha(const PolicyNetwork& net, const ImportanceFactors& alpha) {
  if (alpha.size() != net.num_outputs())
    throw ShapeError("importance factors: " + std::to_string(alpha.size()) + " for " +
                     std::to_string(net.num_outputs()) + " outputs");
}

inline void fill_groups(const PolicyNetwork& net, AttributionResult& res) {
  res.group_totals["image"] = res.image_relevance.sum();
  res.group_abs_totals["image"] = res.image_relevance.abs_sum();
  for (const auto& g : net.input_groups) {
    double s = 0.0, a = 0.0;
    for (std::size_t k = g.lo; k < g.hi; ++k) {
      s += res.config_relevance[k];
      a += std::abs(res.config_relevance[k]);
    }
    res.group_totals[g.name] = s;
    res.group_abs_totals[g.name] = a;
  }
}

inline double output_total(const Tensor& torques, const ImportanceFactors& alpha) {
  double t = 0.0;
  for (std::size_t j = 0; j < torques.size(); ++j) t += alpha[j] * std::abs(torques[j]);
  return t;
}

inline void split_concat(const PolicyNetwork& net, const Tensor& r, Tensor& points, Tensor& config) {
  const std::size_t fdim = net.feature_dim();
  points = Tensor({fdim});
  config = Tensor({net.config_dim});
  for (std::size_t k = 0; k < fdim; ++k) points[k] = r[k];
  for (std::size_t k = 0; k < net.config_dim; ++k) config[k] = r[fdim + k];
}

/// Takes absolute values and rescales so the layer carries `target`.
inline void absolute_renormalize(Tensor& r, double target, DropCounter& drops) {
  for (double& v : r.data()) v = std::abs(v);
  const double s = r.sum();
  if (s > 0.0) {
    r *= target / s;
  } else {
    drops.drop(target);
  }
}

using OutputRule = Tensor (*)(const Dense&, const Tensor&, const Tensor&, DropCounter&, bool);

/// Shared backward walk for the two relevance-propagation methods.
inline AttributionResult propagate_relevance(const PolicyNetwork& net, const ImportanceFactors& alpha,
                                             const ForwardResult& fwd, Method method,
                                             OutputRule output_rule = &propagate_output_layer) {
  const ForwardTrace& tr = fwd.trace;
  AttributionResult res;
  res.method = method;
  res.torques = fwd.torques;
  res.output_total = output_total(fwd.torques, alpha);
  DropCounter& drops = res.drops;

  const bool rap = method == Method::rap;
  Tensor r = init_output_relevance(fwd.torques, alpha);
  if (rap)
    for (double& v : r.data()) v = std::abs(v);
  res.layer_totals.push_back(rap ? r.sum() : res.output_total);

  auto rap_step = [&](Tensor& relevance, double incoming, double dropped_before) {
    absolute_renormalize(relevance, incoming - (drops.mass - dropped_before), drops);
  };

  const std::size_t last = net.fusion_layers.size() - 1;
  for (std::size_t i = net.fusion_layers.size(); i-- > 0;) {
    const Layer& layer = net.fusion_layers[i];
    const Tensor& x = tr.fusion_inputs[i];
    if (const auto* d = std::get_if<Dense>(&layer)) {
      const double incoming = r.sum();
      const double before = drops.mass;
      if (rap) {
        r = dense_fraction_rule(*d, x, r, Contribution::z, drops);
        rap_step(r, incoming, before);
      } else if (i == last) {
        r = output_rule(*d, x, r, drops, has_negative(x));
      } else if (has_negative(x)) {
        r = propagate_input_layer(*d, x, r, drops);
      } else {
        r = propagate_dense_zplus(*d, x, r, drops);
      }
    } else {
      r = propagate_relu(x, r, true);
    }
    res.layer_totals.push_back(r.sum());
  }

  Tensor r_points, r_config;
  split_concat(net, r, r_points, r_config);
  res.config_relevance = std::move(r_config);

  for (std::size_t i = net.vision_layers.size(); i-- > 0;) {
    const Layer& layer = net.vision_layers[i];
    const Tensor& x = tr.vision_inputs[i];
    if (const auto* s = std::get_if<SpatialSoftmax>(&layer)) {
      r = propagate_spatial_softmax(*s, x, r_points);
    } else if (const auto* c = std::get_if<Conv2D>(&layer)) {
      const double incoming = r.sum();
      const double before = drops.mass;
      if (rap) {
        r = propagate_conv(*c, x, r, Contribution::z, drops);
        rap_step(r, incoming, before);
      } else {
        r = propagate_conv(*c, x, r,
                           has_negative(x) ? Contribution::signed_input : Contribution::zplus, drops);
      }
    } else {
      // The spatial softmax hands relevance to every pixel, active or not.
      const bool feeds_softmax = std::holds_alternative<SpatialSoftmax>(net.vision_layers[i + 1]);
      r = propagate_relu(x, r, !feeds_softmax);
    }
    res.layer_totals.push_back(r.sum() + res.config_relevance.sum());
  }
  res.image_relevance = std::move(r);
  fill_groups(net, res);
  return res;
}

}  // namespace detail

inline AttributionResult attribute_dtd(const PolicyNetwork& net, const Tensor& image,
                                       const Tensor& config, const ImportanceFactors& alpha) {
  detail::require_alpha(net, alpha);
  return detail::propagate_relevance(net, alpha, network_forward(net, image, config), Method::dtd);
}

inline AttributionResult attribute_rap(const PolicyNetwork& net, const Tensor& image,
                                       const Tensor& config, const ImportanceFactors& alpha) {
  detail::require_alpha(net, alpha);
  return detail::propagate_relevance(net, alpha, network_forward(net, image, config), Method::rap);
}

/// Guided gradient of each alpha-weighted torque, seeded with alpha_j * tau_j
/// so negative torques contribute through |tau_j|, summed over joints and
/// multiplied elementwise by the input.
inline AttributionResult attribute_gbp(const PolicyNetwork& net, const Tensor& image,
                                       const Tensor& config, const ImportanceFactors& alpha) {
  detail::require_alpha(net, alpha);
  const ForwardResult fwd = network_forward(net, image, config);
  AttributionResult res;
  res.method = Method::gbp;
  res.torques = fwd.torques;
  res.output_total = detail::output_total(fwd.torques, alpha);
  res.image_relevance = Tensor(image.shape());
  res.config_relevance = Tensor(config.shape());
  for (std::size_t j = 0; j < net.num_outputs(); ++j) {
    const double seed_value = alpha[j] * fwd.torques[j];
    if (seed_value == 0.0) continue;
    Tensor seed({net.num_outputs()});
    seed[j] = seed_value;
    const InputGradients g = backpropagate(net, fwd.trace, seed, GradientMode::guided);
    res.image_relevance += g.image;
    res.config_relevance += g.config;
  }
  for (std::size_t k = 0; k < image.size(); ++k) res.image_relevance[k] *= image[k];
  for (std::size_t k = 0; k < config.size(); ++k) res.config_relevance[k] *= config[k];
  res.layer_totals.push_back(res.input_total());
  detail::fill_groups(net, res);
  return res;
}

inline AttributionResult attribute(Method method, const PolicyNetwork& net, const Tensor& image,
                                   const Tensor& config, const ImportanceFactors& alpha) {
  switch (method) {
    case Method::dtd: return attribute_dtd(net, image, config, alpha);
    case Method::rap: return attribute_rap(net, image, config, alpha);
    case Method::gbp: return attribute_gbp(net, image, config, alpha);
  }
  throw ConfigError("unknown method");
}

}  // namespace pxray
