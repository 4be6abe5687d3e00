#pragma once

#include <cmath>
#include <filesystem>
#include <unistd.h>
#include <random>
#include <string>
#include <vector>

#include "pxray/pxray.hpp"

namespace pxray::test {

inline Dense dense(std::size_t in, std::size_t out, std::vector<double> w, std::vector<double> b) {
  return Dense{Tensor({in, out}, std::move(w)), Tensor({out}, std::move(b))};
}

inline Dense dense(std::size_t in, std::size_t out, std::vector<double> w) {
  return dense(in, out, std::move(w), std::vector<double>(out, 0.0));
}

/// 1x1 image through a 1x1 conv: the feature point is pinned at (0, 0), so
/// only the configuration branch carries signal.
inline PolicyNetwork config_only_net(std::size_t config_dim, std::vector<InputGroup> groups,
                                     std::vector<Layer> fusion) {
  PolicyNetwork net;
  net.image_shape = {1, 1, 1};
  net.config_dim = config_dim;
  net.input_groups = std::move(groups);
  net.vision_layers = {Conv2D{Tensor({1, 1, 1, 1}, {1.0}), Tensor({1}), 1, Padding::valid}, ReLU{},
                       SpatialSoftmax{1, 1, 1}};
  net.fusion_layers = std::move(fusion);
  validate(net);
  return net;
}

inline std::vector<InputGroup> pos_vel_groups(std::size_t joints) {
  return {{"joint_pos", 0, joints}, {"joint_vel", joints, 2 * joints}};
}

/// 3x3 image, 2x2 conv with two filters, spatial softmax, 12 -> 3 -> 2 dense.
inline PolicyNetwork two_joint_fixture() {
  PolicyNetwork net;
  net.image_shape = {3, 3, 1};
  net.config_dim = 8;
  net.input_groups = config_groups(2);
  Conv2D conv;
  conv.kernels = Tensor({2, 2, 1, 2}, {0.5, -0.25, 1.0, 0.75, -0.5, 0.5, 0.25, 1.5});
  conv.bias = Tensor({2}, {0.1, -0.2});
  net.vision_layers = {conv, ReLU{}, SpatialSoftmax{2, 2, 2}};
  std::vector<double> w1;
  for (int k = 0; k < 36; ++k) w1.push_back(std::sin(0.7 * k + 0.3));
  std::vector<double> w2{0.9, -0.4, 0.3, 0.8, -0.6, 0.5};
  net.fusion_layers = {dense(12, 3, w1, {0.05, -0.1, 0.2}), ReLU{}, dense(3, 2, w2, {0.01, -0.02})};
  validate(net);
  return net;
}

inline Tensor two_joint_image() {
  return Tensor({3, 3, 1}, {0.1, 0.9, 0.3, 0.0, 0.5, 1.0, 0.7, 0.2, 0.4});
}

inline Tensor two_joint_config() {
  return Tensor::vector({0.4, -1.2, 0.3, -0.5, 0.8, 0.6, -0.2, 0.1});
}

/// Scratch directory under the test binary's working directory.
inline std::filesystem::path scratch_dir(const std::string& name) {
  // ctest runs each case in its own process, possibly in parallel.
  auto p = std::filesystem::current_path() / ("scratch_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace pxray::test
