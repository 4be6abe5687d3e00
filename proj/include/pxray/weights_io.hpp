#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pxray/errors.hpp"
#include "pxray/network.hpp"

namespace pxray {

inline constexpr int kWeightFormatVersion = 1;

/// 17 significant digits, always in exponent form so the digit count is fixed.
inline std::string format_double17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.16e", v);
  return buf;
}

namespace detail {

inline void write_array(std::ostream& os, std::span<const double> values) {
  os << '[';
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) os << ',';
    os << format_double17(values[i]);
  }
  os << ']';
}

inline void write_shape(std::ostream& os, const Shape& shape) {
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
}

inline void write_layer(std::ostream& os, const Layer& layer) {
  os << "{\"type\":\"" << layer_type_name(layer) << '"';
  if (const auto* d = std::get_if<Dense>(&layer)) {
    os << ",\"in\":" << d->in_dim() << ",\"out\":" << d->out_dim() << ",\"weights\":";
    write_array(os, d->weights.data());
    os << ",\"bias\":";
    write_array(os, d->bias.data());
  } else if (const auto* c = std::get_if<Conv2D>(&layer)) {
    os << ",\"kernel_shape\":";
    write_shape(os, c->kernels.shape());
    os << ",\"stride\":" << c->stride << ",\"padding\":\""
       << (c->padding == Padding::valid ? "valid" : "same") << "\",\"weights\":";
    write_array(os, c->kernels.data());
    os << ",\"bias\":";
    write_array(os, c->bias.data());
  } else if (const auto* s = std::get_if<SpatialSoftmax>(&layer)) {
    os << ",\"rows\":" << s->rows << ",\"cols\":" << s->cols << ",\"channels\":" << s->channels;
  }
  os << '}';
}

inline void write_layers(std::ostream& os, const std::vector<Layer>& layers) {
  os << "[\n";
  for (std::size_t i = 0; i < layers.size(); ++i) {
    os << "    ";
    write_layer(os, layers[i]);
    os << (i + 1 < layers.size() ? ",\n" : "\n");
  }
  os << "  ]";
}

using Json = nlohmann::ordered_json;

inline std::vector<double> read_floats(const Json& j, const char* key, const std::string& where) {
  if (!j.contains(key) || !j[key].is_array())
    throw ParseError(where + ": missing array '" + key + "'");
  std::vector<double> out;
  out.reserve(j[key].size());
  for (const auto& v : j[key]) {
    if (!v.is_number()) throw ParseError(where + ": non-numeric entry in '" + key + "'");
    out.push_back(v.get<double>());
  }
  return out;
}

inline std::size_t read_count(const Json& j, const char* key, const std::string& where) {
  if (!j.contains(key) || !j[key].is_number_integer() || j[key].get<long long>() <= 0)
    throw ParseError(where + ": '" + key + "' must be a positive integer");
  return j[key].get<std::size_t>();
}

inline Tensor make_tensor(Shape shape, std::vector<double> data, const char* key,
                          const std::string& where) {
  if (data.size() != shape_size(shape))
    throw DimensionError(where + ": '" + key + "' has " + std::to_string(data.size()) +
                         " values, expected " + std::to_string(shape_size(shape)) + " for shape " +
                         shape_str(shape));
  return Tensor(std::move(shape), std::move(data));
}

inline Layer read_layer(const Json& j, const std::string& where) {
  if (!j.is_object() || !j.contains("type") || !j["type"].is_string())
    throw ParseError(where + ": layer object needs a string 'type'");
  const std::string type = j["type"].get<std::string>();
  if (type == "dense") {
    const std::size_t in = read_count(j, "in", where);
    const std::size_t out = read_count(j, "out", where);
    return Dense{make_tensor({in, out}, read_floats(j, "weights", where), "weights", where),
                 make_tensor({out}, read_floats(j, "bias", where), "bias", where)};
  }
  if (type == "conv2d") {
    if (!j.contains("kernel_shape") || !j["kernel_shape"].is_array() || j["kernel_shape"].size() != 4)
      throw ParseError(where + ": 'kernel_shape' must be [kh,kw,cin,cout]");
    Shape ks;
    for (const auto& v : j["kernel_shape"]) {
      if (!v.is_number_integer() || v.get<long long>() <= 0)
        throw ParseError(where + ": 'kernel_shape' entries must be positive integers");
      ks.push_back(v.get<std::size_t>());
    }
    Conv2D c;
    c.stride = j.contains("stride") ? read_count(j, "stride", where) : 1;
    const std::string pad = j.value("padding", std::string("valid"));
    if (pad == "valid") c.padding = Padding::valid;
    else if (pad == "same") c.padding = Padding::same;
    else throw ParseError(where + ": padding must be 'valid' or 'same', got '" + pad + "'");
    const std::size_t cout = ks[3];
    c.kernels = make_tensor(ks, read_floats(j, "weights", where), "weights", where);
    c.bias = make_tensor({cout}, read_floats(j, "bias", where), "bias", where);
    return c;
  }
  if (type == "relu") return ReLU{};
  if (type == "spatial_softmax") {
    return SpatialSoftmax{read_count(j, "rows", where), read_count(j, "cols", where),
                          read_count(j, "channels", where)};
  }
  throw ParseError(where + ": unknown layer type '" + type +
                   "' (supported: dense, conv2d, relu, spatial_softmax)");
}

}  // namespace detail

inline std::string weights_to_json(const PolicyNetwork& net) {
  std::ostringstream os;
  os << "{\n  \"version\":" << kWeightFormatVersion << ",\n  \"image_shape\":";
  detail::write_shape(os, net.image_shape);
  os << ",\n  \"config_dim\":" << net.config_dim << ",\n  \"input_groups\":{";
  for (std::size_t i = 0; i < net.input_groups.size(); ++i) {
    const auto& g = net.input_groups[i];
    os << (i ? "," : "") << '"' << g.name << "\":[" << g.lo << ',' << g.hi << ']';
  }
  os << "},\n  \"vision_layers\":";
  detail::write_layers(os, net.vision_layers);
  os << ",\n  \"fusion_layers\":";
  detail::write_layers(os, net.fusion_layers);
  os << "\n}\n";
  return os.str();
}

inline PolicyNetwork weights_from_json(const std::string& text) {
  detail::Json j;
  try {
    j = detail::Json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("weight file is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ParseError("weight file must be a JSON object");
  if (!j.contains("version") || !j["version"].is_number_integer())
    throw ParseError("weight file: missing integer 'version'");
  if (j["version"].get<int>() != kWeightFormatVersion)
    throw VersionError("weight file version " + std::to_string(j["version"].get<int>()) +
                       " not supported (expected " + std::to_string(kWeightFormatVersion) + ")");
  PolicyNetwork net;
  try {
    if (!j.contains("image_shape") || !j["image_shape"].is_array() || j["image_shape"].size() != 3)
      throw ParseError("weight file: 'image_shape' must be [H,W,C]");
    for (const auto& v : j["image_shape"]) {
      if (!v.is_number_integer() || v.get<long long>() <= 0)
        throw ParseError("weight file: 'image_shape' entries must be positive integers");
      net.image_shape.push_back(v.get<std::size_t>());
    }
    net.config_dim = detail::read_count(j, "config_dim", "weight file");
    if (!j.contains("input_groups") || !j["input_groups"].is_object())
      throw ParseError("weight file: missing object 'input_groups'");
    for (const auto& [name, range] : j["input_groups"].items()) {
      if (!range.is_array() || range.size() != 2 || !range[0].is_number_integer() ||
          !range[1].is_number_integer())
        throw ParseError("weight file: input group '" + name + "' must be [lo,hi]");
      net.input_groups.push_back({name, range[0].get<std::size_t>(), range[1].get<std::size_t>()});
    }
    for (const char* key : {"vision_layers", "fusion_layers"}) {
      if (!j.contains(key) || !j[key].is_array())
        throw ParseError(std::string("weight file: missing array '") + key + "'");
      auto& dst = std::string(key) == "vision_layers" ? net.vision_layers : net.fusion_layers;
      for (std::size_t i = 0; i < j[key].size(); ++i)
        dst.push_back(detail::read_layer(j[key][i], std::string(key) + "[" + std::to_string(i) + "]"));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("weight file: ") + e.what());
  }
  try {
    validate(net);
  } catch (const ShapeError& e) {
    throw DimensionError(std::string("weight file: ") + e.what());
  }
  return net;
}

inline void save_weights(const PolicyNetwork& net, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open '" + path + "' for writing");
  out << weights_to_json(net);
  if (!out) throw ConfigError("failed writing '" + path + "'");
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline PolicyNetwork load_weights(const std::string& path) {
  return weights_from_json(read_text_file(path));
}

}  // namespace pxray
