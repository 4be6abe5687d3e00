#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <random>
#include <string>
#include <vector>

#include "pxray/attribution.hpp"
#include "pxray/kinematics.hpp"
#include "pxray/layers.hpp"
#include "pxray/network.hpp"

// Property suites with their oracles. Each oracle here is written against
// the mathematical definition, not against the code path it checks.

namespace pxray {

struct SuiteReport {
  std::string name;
  std::size_t cases = 0;
  std::size_t failures = 0;
  std::size_t skipped = 0;
  double worst_error = 0.0;
  double tolerance = 0.0;
  double seconds = 0.0;

  bool passed() const { return cases > 0 && failures == 0; }
};

/// Deliberately broken rules, for checking that the suites can fail.
enum class Fault { none, output_rule_ignores_sign };

// ---------------------------------------------------------------------------
// Random fixtures

struct RandomNetOptions {
  std::size_t min_dense = 2;
  std::size_t max_dense = 4;
  std::size_t max_width = 32;
  std::size_t image_size = 6;
  std::size_t joints = 2;
  bool two_conv = false;
};

inline Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo, double hi) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.data()) v = u(rng);
  return t;
}

inline std::size_t random_between(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng() % (hi - lo + 1));
}

/// Mixed-sign policy: small conv stack, spatial softmax, 2-4 dense layers.
inline PolicyNetwork random_policy(std::mt19937_64& rng, const RandomNetOptions& opt = {}) {
  PolicyNetwork net;
  const std::size_t cin = random_between(rng, 1, 2);
  net.image_shape = {opt.image_size, opt.image_size, cin};
  const std::size_t j = opt.joints;
  net.config_dim = 2 * j + 4;
  net.input_groups = {{"joint_pos", 0, j}, {"joint_vel", j, 2 * j}, {"ee_pos", 2 * j, 2 * j + 2},
                      {"ee_vel", 2 * j + 2, 2 * j + 4}};
  Shape shape = net.image_shape;
  const std::size_t n_conv = opt.two_conv ? 2 : 1;
  for (std::size_t c = 0; c < n_conv; ++c) {
    Conv2D conv;
    const std::size_t k = random_between(rng, 1, std::min<std::size_t>(3, std::min(shape[0], shape[1])));
    const std::size_t cout = random_between(rng, 1, 3);
    conv.kernels = random_tensor(rng, {k, k, shape[2], cout}, -1.0, 1.0);
    conv.bias = random_tensor(rng, {cout}, -0.3, 0.3);
    conv.stride = random_between(rng, 1, 2);
    conv.padding = rng() % 2 ? Padding::same : Padding::valid;
    shape = layer_output_shape(conv, shape);
    net.vision_layers.emplace_back(std::move(conv));
    net.vision_layers.emplace_back(ReLU{});
  }
  net.vision_layers.emplace_back(SpatialSoftmax{shape[0], shape[1], shape[2]});
  std::size_t width = 2 * shape[2] + net.config_dim;
  const std::size_t n_dense = random_between(rng, opt.min_dense, opt.max_dense);
  for (std::size_t d = 0; d + 1 < n_dense; ++d) {
    const std::size_t out = random_between(rng, 2, opt.max_width);
    const double scale = 1.0 / std::sqrt(static_cast<double>(width));
    net.fusion_layers.emplace_back(
        Dense{random_tensor(rng, {width, out}, -2.0 * scale, 2.0 * scale),
              random_tensor(rng, {out}, -0.2, 0.2)});
    net.fusion_layers.emplace_back(ReLU{});
    width = out;
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(width));
  net.fusion_layers.emplace_back(Dense{random_tensor(rng, {width, j}, -2.0 * scale, 2.0 * scale),
                                       random_tensor(rng, {j}, -0.2, 0.2)});
  validate(net);
  return net;
}

struct RandomInputs {
  Tensor image;
  Tensor config;
};

/// Image in [0, 1]; configuration zero-centered.
inline RandomInputs random_inputs(std::mt19937_64& rng, const PolicyNetwork& net) {
  return {random_tensor(rng, net.image_shape, 0.0, 1.0),
          random_tensor(rng, {net.config_dim}, -1.5, 1.5)};
}

inline ImportanceFactors random_alpha(std::mt19937_64& rng, std::size_t joints) {
  Tensor a = random_tensor(rng, {joints}, 0.05, 1.0);
  const double s = a.sum();
  std::vector<double> v(a.values());
  for (double& x : v) x /= s;
  return {v};
}

namespace detail {

inline double elapsed_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Output-rule variant that routes every column through z+ fractions and keeps the
/// signed relevance: negative torques then cancel positive ones.
inline Tensor output_rule_ignoring_sign(const Dense& d, const Tensor& x, const Tensor& r_out,
                                        DropCounter& drops, bool) {
  return detail::dense_fraction_rule(d, x, r_out, Contribution::signed_input, drops);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Conservation

/// |sum R_in + dropped - sum alpha|tau|| / sum alpha|tau| for one dtd run.
inline double dtd_conservation_error(const PolicyNetwork& net, const Tensor& image, const Tensor& config,
                                     const ImportanceFactors& alpha, Fault fault = Fault::none) {
  const ForwardResult fwd = network_forward(net, image, config);
  const AttributionResult r =
      fault == Fault::output_rule_ignores_sign
          ? detail::propagate_relevance(net, alpha, fwd, Method::dtd, &detail::output_rule_ignoring_sign)
          : detail::propagate_relevance(net, alpha, fwd, Method::dtd);
  const double expected = r.output_total;
  const double got = r.input_total() + r.drops.mass;
  if (expected == 0.0) return std::abs(got);
  return std::abs(got - expected) / expected;
}

inline SuiteReport run_conservation_suite(std::size_t trials, std::uint64_t seed, Fault fault = Fault::none) {
  SuiteReport rep{"conservation"};
  rep.tolerance = 1e-6;
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(seed);
  for (std::size_t k = 0; k < trials; ++k) {
    RandomNetOptions opt;
    opt.two_conv = k % 3 == 0;
    opt.joints = random_between(rng, 1, 4);
    const PolicyNetwork net = random_policy(rng, opt);
    const RandomInputs in = random_inputs(rng, net);
    const ImportanceFactors alpha = random_alpha(rng, net.num_outputs());
    const double err = dtd_conservation_error(net, in.image, in.config, alpha, fault);
    ++rep.cases;
    rep.worst_error = std::max(rep.worst_error, err);
    if (!(err <= rep.tolerance)) ++rep.failures;
  }
  rep.seconds = detail::elapsed_since(t0);
  return rep;
}

// ---------------------------------------------------------------------------
// Gradients

/// Agreement test used by every gradient check: absolute floor, then relative.
inline bool gradients_agree(double analytic, double numeric, double rel_tol = 1e-4,
                            double abs_floor = 1e-6) {
  const double diff = std::abs(analytic - numeric);
  if (diff <= abs_floor) return true;
  return diff / std::max(std::abs(analytic), std::abs(numeric)) <= rel_tol;
}

namespace detail {

/// Smallest |pre-activation| feeding any ReLU; finite differences are only
/// meaningful away from the kink.
inline double min_relu_margin(const PolicyNetwork& net, const ForwardTrace& tr) {
  double m = INFINITY;
  auto scan = [&](const std::vector<Layer>& layers, const std::vector<Tensor>& inputs) {
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (std::holds_alternative<ReLU>(layers[i]))
        for (double v : inputs[i].data()) m = std::min(m, std::abs(v));
  };
  scan(net.vision_layers, tr.vision_inputs);
  scan(net.fusion_layers, tr.fusion_inputs);
  return m;
}

}  // namespace detail

inline SuiteReport run_gradient_suite(std::size_t trials, std::uint64_t seed) {
  SuiteReport rep{"gradients"};
  rep.tolerance = 1e-4;
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(seed);
  while (rep.cases < trials) {
    RandomNetOptions opt;
    opt.max_width = 16;
    opt.image_size = 5 + rep.cases % 3;
    opt.two_conv = rep.cases % 2 == 1;
    const PolicyNetwork net = random_policy(rng, opt);
    const RandomInputs in = random_inputs(rng, net);
    const ForwardResult fwd = network_forward(net, in.image, in.config);
    if (detail::min_relu_margin(net, fwd.trace) < 1e-3) {
      ++rep.skipped;
      continue;
    }
    bool ok = true;
    for (std::size_t j = 0; j < net.num_outputs(); ++j) {
      const InputGradients a = analytic_gradient(net, in.image, in.config, j);
      const InputGradients n = numeric_gradient(net, in.image, in.config, j);
      auto compare = [&](const Tensor& ta, const Tensor& tn) {
        for (std::size_t k = 0; k < ta.size(); ++k) {
          const double diff = std::abs(ta[k] - tn[k]);
          if (diff > 1e-6)
            rep.worst_error = std::max(rep.worst_error, diff / std::max(std::abs(ta[k]), std::abs(tn[k])));
          if (!gradients_agree(ta[k], tn[k])) ok = false;
        }
      };
      compare(a.image, n.image);
      compare(a.config, n.config);
    }
    ++rep.cases;
    if (!ok) ++rep.failures;
  }
  rep.seconds = detail::elapsed_since(t0);
  return rep;
}

// ---------------------------------------------------------------------------
// Kinematics

/// Prediction from the Jacobian: alpha_j proportional to |column j| / I_j.
inline std::vector<double> jacobian_alpha(const ArmModel& model, const std::vector<double>& theta) {
  const auto cols = jacobian(model, theta);
  std::vector<double> a(cols.size());
  double s = 0.0;
  for (std::size_t j = 0; j < cols.size(); ++j) {
    a[j] = cols[j].norm() / model.joint_inertias[j];
    s += a[j];
  }
  for (double& v : a) v /= s;
  return a;
}

inline SuiteReport run_kinematics_suite(std::size_t trials, std::uint64_t seed) {
  SuiteReport rep{"kinematics"};
  rep.tolerance = 0.05;
  const auto t0 = std::chrono::steady_clock::now();
  {
    const ArmModel fixture{{1.0, 1.0}, {1.0, 1.0}, 0.01, {}};
    const auto a = importance_factors(fixture, ArmState::at_rest({0.0, 0.0}), AlphaMode::kinematic);
    const double e = std::max(std::abs(a[0] - 2.0 / 3.0) / (2.0 / 3.0), std::abs(a[1] - 1.0 / 3.0) / (1.0 / 3.0));
    ++rep.cases;
    if (!(e <= 1e-3)) ++rep.failures;
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> length(0.4, 1.5), inertia(0.2, 3.0), angle(-3.1, 3.1),
      elbow(-2.5, 2.5), vel(-1.0, 1.0);
  const double dts[] = {0.01, 0.005, 0.001};
  for (std::size_t k = 0; k < trials; ++k) {
    ArmModel m;
    const std::size_t joints = random_between(rng, 2, 4);
    for (std::size_t j = 0; j < joints; ++j) {
      m.link_lengths.push_back(length(rng));
      m.joint_inertias.push_back(inertia(rng));
    }
    m.dt = dts[k % 3];
    ArmState s;
    for (std::size_t j = 0; j < joints; ++j) {
      s.theta.push_back(j == 0 ? angle(rng) : elbow(rng));
      s.omega.push_back(vel(rng));
    }
    const auto got = importance_factors(m, s, AlphaMode::kinematic);
    const auto want = jacobian_alpha(m, s.theta);
    double err = 0.0;
    for (std::size_t j = 0; j < joints; ++j) err = std::max(err, std::abs(got[j] - want[j]) / want[j]);
    ++rep.cases;
    rep.worst_error = std::max(rep.worst_error, err);
    if (!(err <= rep.tolerance)) ++rep.failures;
  }
  rep.seconds = detail::elapsed_since(t0);
  return rep;
}

// ---------------------------------------------------------------------------
// Rule reductions

namespace detail {

inline bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

inline Dense random_dense(std::mt19937_64& rng, std::size_t in, std::size_t out) {
  return Dense{random_tensor(rng, {in, out}, -1.0, 1.0), random_tensor(rng, {out}, -0.5, 0.5)};
}

}  // namespace detail

/// Signed-input rule on positive inputs, and the output rule on positive
/// outputs, must both reproduce the z+-rule bit for bit.
inline SuiteReport run_reduction_suite(std::size_t trials, std::uint64_t seed) {
  SuiteReport rep{"reductions"};
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(seed);
  for (std::size_t k = 0; k < trials; ++k) {
    const std::size_t in = random_between(rng, 1, 32), out = random_between(rng, 1, 32);
    const Dense d = detail::random_dense(rng, in, out);
    const Tensor x = random_tensor(rng, {in}, 0.01, 2.0);
    const Tensor r = random_tensor(rng, {out}, -1.0, 1.0);
    DropCounter a, b;
    ++rep.cases;
    if (!detail::bit_equal(propagate_input_layer(d, x, r, a), propagate_dense_zplus(d, x, r, b)) ||
        a.mass != b.mass || a.count != b.count)
      ++rep.failures;
  }
  for (std::size_t k = 0; k < trials; ++k) {
    const std::size_t in = random_between(rng, 1, 32), out = random_between(rng, 1, 32);
    Dense d = detail::random_dense(rng, in, out);
    const Tensor x = random_tensor(rng, {in}, 0.01, 2.0);
    // Flip columns so every bias-free pre-activation is positive.
    for (std::size_t j = 0; j < out; ++j) {
      double pre = 0.0;
      for (std::size_t i = 0; i < in; ++i) pre += x[i] * d.w(i, j);
      if (pre <= 0.0)
        for (std::size_t i = 0; i < in; ++i) d.weights[i * out + j] = -d.weights[i * out + j];
    }
    Tensor r = dense_forward(d, x);
    for (double& v : r.data()) v = std::abs(v) + 0.01;
    DropCounter a, b;
    ++rep.cases;
    if (!detail::bit_equal(propagate_output_layer(d, x, r, a), propagate_dense_zplus(d, x, r, b)) ||
        a.mass != b.mass)
      ++rep.failures;
  }
  rep.seconds = detail::elapsed_since(t0);
  return rep;
}

// ---------------------------------------------------------------------------
// Convolution as an unrolled dense map

/// Builds the [in_size, out_size] matrix of a convolution by direct index
/// arithmetic (im2col unrolled), independent of the library's tap walker.
inline Dense unroll_conv(const Conv2D& c, const Shape& in_shape) {
  const std::size_t h = in_shape[0], w = in_shape[1], cin = in_shape[2];
  const std::size_t kh = c.kernels.dim(0), kw = c.kernels.dim(1), cout = c.kernels.dim(3);
  const std::size_t s = c.stride;
  std::size_t oh, ow;
  long pt = 0, pl = 0;
  if (c.padding == Padding::valid) {
    oh = (h - kh) / s + 1;
    ow = (w - kw) / s + 1;
  } else {
    oh = (h + s - 1) / s;
    ow = (w + s - 1) / s;
    pt = std::max<long>(0, static_cast<long>((oh - 1) * s + kh) - static_cast<long>(h)) / 2;
    pl = std::max<long>(0, static_cast<long>((ow - 1) * s + kw) - static_cast<long>(w)) / 2;
  }
  const std::size_t n_in = h * w * cin, n_out = oh * ow * cout;
  Dense d{Tensor({n_in, n_out}), Tensor({n_out})};
  for (std::size_t oy = 0; oy < oh; ++oy)
    for (std::size_t ox = 0; ox < ow; ++ox)
      for (std::size_t co = 0; co < cout; ++co) {
        const std::size_t col = (oy * ow + ox) * cout + co;
        d.bias[col] = c.bias[co];
        for (std::size_t ky = 0; ky < kh; ++ky)
          for (std::size_t kx = 0; kx < kw; ++kx)
            for (std::size_t ci = 0; ci < cin; ++ci) {
              const long iy = static_cast<long>(oy * s + ky) - pt;
              const long ix = static_cast<long>(ox * s + kx) - pl;
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
              const std::size_t row = (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * cin + ci;
              d.weights[row * n_out + col] = c.kernels[((ky * kw + kx) * cin + ci) * cout + co];
            }
      }
  return d;
}

inline SuiteReport run_conv_unroll_suite(std::size_t trials, std::uint64_t seed) {
  SuiteReport rep{"conv_unroll"};
  rep.tolerance = 1e-12;
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(seed);
  for (std::size_t k = 0; k < trials; ++k) {
    Conv2D c;
    const std::size_t cin = random_between(rng, 1, 2), cout = random_between(rng, 1, 3);
    const std::size_t kh = random_between(rng, 1, 3), kw = random_between(rng, 1, 3);
    c.kernels = random_tensor(rng, {kh, kw, cin, cout}, -1.0, 1.0);
    c.bias = random_tensor(rng, {cout}, -0.5, 0.5);
    c.stride = random_between(rng, 1, 2);
    c.padding = rng() % 2 ? Padding::same : Padding::valid;
    const Tensor x = random_tensor(rng, {6, 6, cin}, 0.0, 1.0);
    const Shape out_shape = layer_output_shape(c, x.shape());
    const Tensor r = random_tensor(rng, out_shape, 0.0, 1.0);
    DropCounter a, b;
    const Tensor got = propagate_conv_zplus(c, x, r, a);
    const Dense d = unroll_conv(c, x.shape());
    const Tensor want = propagate_dense_zplus(d, x.reshaped({x.size()}), r.reshaped({r.size()}), b);
    double err = 0.0;
    for (std::size_t i = 0; i < got.size(); ++i) err = std::max(err, std::abs(got[i] - want[i]));
    err = std::max(err, std::abs(a.mass - b.mass));
    ++rep.cases;
    rep.worst_error = std::max(rep.worst_error, err);
    if (!(err <= rep.tolerance)) ++rep.failures;
  }
  rep.seconds = detail::elapsed_since(t0);
  return rep;
}

}  // namespace pxray
