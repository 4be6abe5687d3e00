#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "pxray/errors.hpp"

namespace pxray {

struct Point2 {
  double x = 0.0;
  double y = 0.0;

  friend Point2 operator+(Point2 a, Point2 b) { return {a.x + b.x, a.y + b.y}; }
  friend Point2 operator-(Point2 a, Point2 b) { return {a.x - b.x, a.y - b.y}; }
  friend Point2 operator*(double s, Point2 p) { return {s * p.x, s * p.y}; }
  friend bool operator==(const Point2&, const Point2&) = default;
  double norm() const { return std::hypot(x, y); }
};

/// Planar serial chain with decoupled per-joint inertia.
struct ArmModel {
  std::vector<double> link_lengths;
  std::vector<double> joint_inertias;
  double dt = 0.01;
  Point2 base_pose{};

  std::size_t joints() const { return link_lengths.size(); }
  double reach() const {
    double r = 0.0;
    for (double l : link_lengths) r += l;
    return r;
  }
};

inline void validate(const ArmModel& model) {
  if (model.link_lengths.empty()) throw ConfigError("arm needs at least one link");
  if (model.joint_inertias.size() != model.link_lengths.size())
    throw ConfigError("arm: " + std::to_string(model.joint_inertias.size()) + " inertias for " +
                      std::to_string(model.link_lengths.size()) + " links");
  for (double l : model.link_lengths)
    if (!(l > 0.0) || !std::isfinite(l)) throw ConfigError("arm: link lengths must be positive");
  for (double i : model.joint_inertias)
    if (!(i > 0.0) || !std::isfinite(i)) throw ConfigError("arm: joint inertias must be positive");
  if (!(model.dt > 0.0) || !std::isfinite(model.dt)) throw ConfigError("arm: dt must be positive");
}

struct ArmState {
  std::vector<double> theta;
  std::vector<double> omega;

  static ArmState at_rest(std::vector<double> theta) {
    std::vector<double> omega(theta.size(), 0.0);
    return {std::move(theta), std::move(omega)};
  }
  friend bool operator==(const ArmState&, const ArmState&) = default;
};

/// Base, every intermediate joint, and the end effector (J + 1 points).
inline std::vector<Point2> forward_kinematics(const ArmModel& model, const std::vector<double>& theta) {
  std::vector<Point2> points{model.base_pose};
  double angle = 0.0;
  for (std::size_t k = 0; k < model.joints(); ++k) {
    angle += theta[k];
    points.push_back(points.back() +
                     model.link_lengths[k] * Point2{std::cos(angle), std::sin(angle)});
  }
  return points;
}

inline Point2 end_effector(const ArmModel& model, const std::vector<double>& theta) {
  return forward_kinematics(model, theta).back();
}

/// Column j is d(ee)/d(theta_j): the lever from joint j to the end effector
/// rotated by 90 degrees.
inline std::vector<Point2> jacobian(const ArmModel& model, const std::vector<double>& theta) {
  const auto points = forward_kinematics(model, theta);
  const Point2 ee = points.back();
  std::vector<Point2> cols;
  for (std::size_t j = 0; j < model.joints(); ++j) {
    const Point2 lever = ee - points[j];
    cols.push_back({-lever.y, lever.x});
  }
  return cols;
}

inline Point2 end_effector_velocity(const ArmModel& model, const ArmState& state) {
  const auto cols = jacobian(model, state.theta);
  Point2 v{};
  for (std::size_t j = 0; j < cols.size(); ++j) v = v + state.omega[j] * cols[j];
  return v;
}

/// One semi-implicit Euler step with only joint j actuated; other joints frozen.
inline ArmState probe_step(const ArmModel& model, const ArmState& state, std::size_t j, double tau) {
  ArmState next = state;
  next.omega[j] += (tau / model.joint_inertias[j]) * model.dt;
  next.theta[j] += next.omega[j] * model.dt;
  return next;
}

enum class AlphaMode { kinematic, uniform };

inline const char* alpha_mode_name(AlphaMode m) {
  return m == AlphaMode::kinematic ? "kinematic" : "uniform";
}

/// Per-joint weights on the torque outputs; non-negative, summing to one.
struct ImportanceFactors {
  std::vector<double> alpha;

  static ImportanceFactors uniform(std::size_t joints) {
    return {std::vector<double>(joints, 1.0 / static_cast<double>(joints))};
  }
  std::size_t size() const { return alpha.size(); }
  double operator[](std::size_t j) const { return alpha[j]; }
};

/// Raw (unnormalized) end-effector displacement per joint under a unit probe
/// torque. The zero-torque step is subtracted so existing joint velocity does
/// not count as torque influence.
inline std::vector<double> probe_displacements(const ArmModel& model, const ArmState& state) {
  std::vector<double> disp(model.joints(), 0.0);
  for (std::size_t j = 0; j < model.joints(); ++j) {
    const Point2 pushed = end_effector(model, probe_step(model, state, j, 1.0).theta);
    const Point2 coasting = end_effector(model, probe_step(model, state, j, 0.0).theta);
    disp[j] = (pushed - coasting).norm();
  }
  return disp;
}

inline ImportanceFactors importance_factors(const ArmModel& model, const ArmState& state,
                                            AlphaMode mode) {
  const std::size_t n = model.joints();
  if (mode == AlphaMode::uniform) return ImportanceFactors::uniform(n);
  std::vector<double> raw = probe_displacements(model, state);
  double total = 0.0;
  for (double v : raw) total += v;
  if (!(total > 0.0) || !std::isfinite(total)) return ImportanceFactors::uniform(n);
  for (double& v : raw) v /= total;
  return {std::move(raw)};
}

}  // namespace pxray
