#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "pxray/errors.hpp"
#include "pxray/layers.hpp"
#include "pxray/tensor.hpp"

namespace pxray {

/// Named half-open index range [lo, hi) over the configuration vector.
struct InputGroup {
  std::string name;
  std::size_t lo = 0;
  std::size_t hi = 0;

  std::size_t size() const { return hi - lo; }
  friend bool operator==(const InputGroup&, const InputGroup&) = default;
};

/// Two-branch visuomotor policy: a vision stack ending in a spatial softmax,
/// whose feature points are concatenated with the configuration vector and
/// fed through a dense stack that outputs one torque per joint.
struct PolicyNetwork {
  Shape image_shape;  // (H, W, C)
  std::size_t config_dim = 0;
  std::vector<InputGroup> input_groups;
  std::vector<Layer> vision_layers;
  std::vector<Layer> fusion_layers;

  const SpatialSoftmax& spatial_softmax() const {
    return std::get<SpatialSoftmax>(vision_layers.back());
  }
  std::size_t feature_dim() const { return spatial_softmax().out_dim(); }
  Concat concat() const { return Concat{{feature_dim(), config_dim}}; }
  std::size_t num_outputs() const { return std::get<Dense>(fusion_layers.back()).out_dim(); }

  const InputGroup* group(const std::string& name) const {
    for (const auto& g : input_groups)
      if (g.name == name) return &g;
    return nullptr;
  }

  friend bool operator==(const PolicyNetwork&, const PolicyNetwork&) = default;
};

/// Checks every structural invariant; throws ShapeError on the first failure.
inline void validate(const PolicyNetwork& net) {
  if (net.image_shape.size() != 3) throw ShapeError("image_shape must be [H,W,C]");
  if (net.vision_layers.empty() || !std::holds_alternative<SpatialSoftmax>(net.vision_layers.back()))
    throw ShapeError("vision stack must end in a spatial_softmax layer");
  Shape shape = net.image_shape;
  for (std::size_t i = 0; i < net.vision_layers.size(); ++i) {
    const Layer& l = net.vision_layers[i];
    if (std::holds_alternative<Dense>(l))
      throw ShapeError("vision layer " + std::to_string(i) + ": dense not allowed");
    if (std::holds_alternative<SpatialSoftmax>(l) && i + 1 != net.vision_layers.size())
      throw ShapeError("vision layer " + std::to_string(i) + ": spatial_softmax must be last");
    if (const auto* c = std::get_if<Conv2D>(&l); c && c->bias.size() != c->cout())
      throw ShapeError("vision layer " + std::to_string(i) + ": bias length mismatch");
    try {
      shape = layer_output_shape(l, shape);
    } catch (const ShapeError& e) {
      throw ShapeError("vision layer " + std::to_string(i) + ": " + e.what());
    }
  }
  if (net.fusion_layers.empty() || !std::holds_alternative<Dense>(net.fusion_layers.back()))
    throw ShapeError("fusion stack must end in a dense layer");
  shape = {net.feature_dim() + net.config_dim};
  for (std::size_t i = 0; i < net.fusion_layers.size(); ++i) {
    const Layer& l = net.fusion_layers[i];
    if (!std::holds_alternative<Dense>(l) && !std::holds_alternative<ReLU>(l))
      throw ShapeError("fusion layer " + std::to_string(i) + ": only dense and relu allowed");
    if (const auto* d = std::get_if<Dense>(&l); d && d->bias.size() != d->out_dim())
      throw ShapeError("fusion layer " + std::to_string(i) + ": bias length mismatch");
    try {
      shape = layer_output_shape(l, shape);
    } catch (const ShapeError& e) {
      throw ShapeError("fusion layer " + std::to_string(i) + ": " + e.what());
    }
  }
  std::vector<bool> covered(net.config_dim, false);
  for (const auto& g : net.input_groups) {
    if (g.lo > g.hi || g.hi > net.config_dim)
      throw ShapeError("input group '" + g.name + "' out of range");
    for (std::size_t k = g.lo; k < g.hi; ++k) {
      if (covered[k]) throw ShapeError("input group '" + g.name + "' overlaps another group");
      covered[k] = true;
    }
  }
  for (std::size_t k = 0; k < net.config_dim; ++k)
    if (!covered[k]) throw ShapeError("config index " + std::to_string(k) + " not in any input group");
  if (const InputGroup* jp = net.group("joint_pos"); jp && jp->size() != net.num_outputs())
    throw ShapeError("output dim " + std::to_string(net.num_outputs()) +
                     " does not match joint count " + std::to_string(jp->size()));
}

/// Cached inputs and outputs of every layer from one forward pass.
struct ForwardTrace {
  std::vector<Tensor> vision_inputs;
  std::vector<Tensor> vision_outputs;
  Tensor concat_output;
  std::vector<Tensor> fusion_inputs;
  std::vector<Tensor> fusion_outputs;

  const Tensor& image() const { return vision_inputs.front(); }
  const Tensor& output() const { return fusion_outputs.back(); }
  std::size_t layer_count() const { return vision_inputs.size() + fusion_inputs.size(); }
};

struct ForwardResult {
  Tensor torques;
  ForwardTrace trace;
};

inline ForwardResult network_forward(const PolicyNetwork& net, const Tensor& image,
                                     const Tensor& config) {
  if (image.shape() != net.image_shape)
    throw ShapeError("image shape " + shape_str(image.shape()) + " expected " +
                     shape_str(net.image_shape));
  if (config.size() != net.config_dim)
    throw ShapeError("config length " + std::to_string(config.size()) + " expected " +
                     std::to_string(net.config_dim));
  ForwardTrace trace;
  Tensor x = image;
  for (const Layer& l : net.vision_layers) {
    trace.vision_inputs.push_back(x);
    x = layer_forward(l, x);
    trace.vision_outputs.push_back(x);
  }
  std::vector<double> joined(x.values());
  joined.insert(joined.end(), config.values().begin(), config.values().end());
  x = Tensor::vector(std::move(joined));
  trace.concat_output = x;
  for (const Layer& l : net.fusion_layers) {
    trace.fusion_inputs.push_back(x);
    x = layer_forward(l, x);
    trace.fusion_outputs.push_back(x);
  }
  return {x, std::move(trace)};
}

inline Tensor network_output(const PolicyNetwork& net, const Tensor& image, const Tensor& config) {
  return network_forward(net, image, config).torques;
}

enum class GradientMode { plain, guided };

/// Parameter gradients, indexed like the layer lists. Parameter-free layers
/// hold empty tensors.
struct ParameterGradients {
  std::vector<Tensor> vision_w, vision_b, fusion_w, fusion_b;

  static ParameterGradients zeros_like(const PolicyNetwork& net) {
    ParameterGradients g;
    auto fill = [](const std::vector<Layer>& layers, std::vector<Tensor>& w, std::vector<Tensor>& b) {
      for (const Layer& l : layers) {
        if (const auto* d = std::get_if<Dense>(&l)) {
          w.emplace_back(d->weights.shape());
          b.emplace_back(d->bias.shape());
        } else if (const auto* c = std::get_if<Conv2D>(&l)) {
          w.emplace_back(c->kernels.shape());
          b.emplace_back(c->bias.shape());
        } else {
          w.emplace_back();
          b.emplace_back();
        }
      }
    };
    fill(net.vision_layers, g.vision_w, g.vision_b);
    fill(net.fusion_layers, g.fusion_w, g.fusion_b);
    return g;
  }
};

struct InputGradients {
  Tensor image;
  Tensor config;
};

namespace detail {

inline Tensor layer_backward(const Layer& layer, const Tensor& x, const Tensor& y_pre_or_x,
                             const Tensor& dy, GradientMode mode, Tensor* dw, Tensor* db) {
  if (const auto* d = std::get_if<Dense>(&layer)) return dense_backward(*d, x, dy, dw, db);
  if (const auto* c = std::get_if<Conv2D>(&layer)) return conv2d_backward(*c, x, dy, dw, db);
  if (const auto* s = std::get_if<SpatialSoftmax>(&layer)) return spatial_softmax_backward(*s, x, dy);
  return mode == GradientMode::guided ? relu_backward_guided(y_pre_or_x, dy)
                                      : relu_backward(y_pre_or_x, dy);
}

}  // namespace detail

/// Reverse pass over a trace. `d_output` is the gradient at the torques.
/// In guided mode every ReLU also discards negative incoming gradient.
inline InputGradients backpropagate(const PolicyNetwork& net, const ForwardTrace& trace,
                                    const Tensor& d_output, GradientMode mode = GradientMode::plain,
                                    ParameterGradients* params = nullptr) {
  Tensor g = d_output;
  for (std::size_t i = net.fusion_layers.size(); i-- > 0;) {
    const Tensor& x = trace.fusion_inputs[i];
    g = detail::layer_backward(net.fusion_layers[i], x, x, g, mode,
                               params ? &params->fusion_w[i] : nullptr,
                               params ? &params->fusion_b[i] : nullptr);
  }
  const std::size_t fdim = net.feature_dim();
  Tensor g_points({fdim});
  Tensor g_config({net.config_dim});
  for (std::size_t k = 0; k < fdim; ++k) g_points[k] = g[k];
  for (std::size_t k = 0; k < net.config_dim; ++k) g_config[k] = g[fdim + k];
  g = g_points;
  for (std::size_t i = net.vision_layers.size(); i-- > 0;) {
    const Tensor& x = trace.vision_inputs[i];
    g = detail::layer_backward(net.vision_layers[i], x, x, g, mode,
                               params ? &params->vision_w[i] : nullptr,
                               params ? &params->vision_b[i] : nullptr);
  }
  return {std::move(g), std::move(g_config)};
}

/// Analytic gradient of torque `output_index` with respect to both inputs.
inline InputGradients analytic_gradient(const PolicyNetwork& net, const Tensor& image,
                                        const Tensor& config, std::size_t output_index) {
  const auto fwd = network_forward(net, image, config);
  Tensor seed({net.num_outputs()});
  seed[output_index] = 1.0;
  return backpropagate(net, fwd.trace, seed);
}

/// Central finite differences, one coordinate at a time.
inline InputGradients numeric_gradient(const PolicyNetwork& net, const Tensor& image,
                                       const Tensor& config, std::size_t output_index,
                                       double h = 1e-5) {
  InputGradients out{Tensor(image.shape()), Tensor(config.shape())};
  Tensor img = image;
  for (std::size_t k = 0; k < img.size(); ++k) {
    const double v = img[k];
    img[k] = v + h;
    const double up = network_output(net, img, config)[output_index];
    img[k] = v - h;
    const double down = network_output(net, img, config)[output_index];
    img[k] = v;
    out.image[k] = (up - down) / (2.0 * h);
  }
  Tensor cfg = config;
  for (std::size_t k = 0; k < cfg.size(); ++k) {
    const double v = cfg[k];
    cfg[k] = v + h;
    const double up = network_output(net, image, cfg)[output_index];
    cfg[k] = v - h;
    const double down = network_output(net, image, cfg)[output_index];
    cfg[k] = v;
    out.config[k] = (up - down) / (2.0 * h);
  }
  return out;
}

}  // namespace pxray
