#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "pxray/errors.hpp"
#include "pxray/kinematics.hpp"
#include "pxray/network.hpp"
#include "pxray/tensor.hpp"

namespace pxray {

/// Fixed parameters of the planar reaching environment. The torque limit and
/// reach threshold are repo constants, not taken from any physical system.
struct EnvParams {
  double torque_limit = 5.0;
  double reach_threshold = 0.05;
  /// Rendered workspace is the square [-extent, extent]^2 around the origin.
  double extent = 1.2;
  std::size_t image_rows = 32;
  std::size_t image_cols = 32;
};

inline ArmModel default_arm() { return ArmModel{{0.6, 0.5}, {1.0, 1.0}, 0.05, {0.0, 0.0}}; }

struct Scene {
  ArmModel arm;
  ArmState state;
  Point2 target;
};

/// Target must lie in the reachable annulus around the arm base.
inline bool target_reachable(const ArmModel& arm, Point2 target) {
  if (arm.joints() != 2) {
    return (target - arm.base_pose).norm() <= arm.reach();
  }
  const double r = (target - arm.base_pose).norm();
  const double lo = std::abs(arm.link_lengths[0] - arm.link_lengths[1]);
  return r >= lo && r <= arm.reach();
}

struct Observation {
  Tensor image;   // [H, W, 1], values in [0, 1]
  Tensor config;  // joint_pos[J], joint_vel[J], ee_pos[2], ee_vel[2]
};

/// Standard configuration layout for a J-joint arm.
inline std::vector<InputGroup> config_groups(std::size_t joints) {
  return {{"joint_pos", 0, joints},
          {"joint_vel", joints, 2 * joints},
          {"ee_pos", 2 * joints, 2 * joints + 2},
          {"ee_vel", 2 * joints + 2, 2 * joints + 4}};
}

inline std::size_t config_dim_for(std::size_t joints) { return 2 * joints + 4; }

// ---------------------------------------------------------------------------
// Rendering

/// Continuous pixel coordinates (column, row) of a world point; pixel k spans
/// [k, k+1) so its center sits at k + 0.5. Rows grow downward.
inline Point2 world_to_pixel(const EnvParams& env, Point2 p) {
  const double span = 2.0 * env.extent;
  return {(p.x + env.extent) / span * static_cast<double>(env.image_cols),
          (env.extent - p.y) / span * static_cast<double>(env.image_rows)};
}

namespace detail {

inline void plot(Tensor& img, const EnvParams& env, double col, double row, double value) {
  if (col < 0.0 || row < 0.0) return;
  const auto c = static_cast<std::size_t>(col);
  const auto r = static_cast<std::size_t>(row);
  if (r >= env.image_rows || c >= env.image_cols) return;
  img.at(r, c, 0) = std::max(img.at(r, c, 0), value);
}

inline void draw_segment(Tensor& img, const EnvParams& env, Point2 a, Point2 b, double value) {
  const Point2 pa = world_to_pixel(env, a);
  const Point2 pb = world_to_pixel(env, b);
  const double len = (pb - pa).norm();
  const auto n = static_cast<std::size_t>(std::ceil(2.0 * len)) + 1;
  for (std::size_t k = 0; k <= n; ++k) {
    const double t = static_cast<double>(k) / static_cast<double>(n);
    const Point2 p = pa + t * (pb - pa);
    plot(img, env, p.x, p.y, value);
  }
}

inline void draw_disc(Tensor& img, const EnvParams& env, Point2 center, double radius_px,
                      double value) {
  const Point2 pc = world_to_pixel(env, center);
  for (std::size_t r = 0; r < env.image_rows; ++r) {
    for (std::size_t c = 0; c < env.image_cols; ++c) {
      const double dx = static_cast<double>(c) + 0.5 - pc.x;
      const double dy = static_cast<double>(r) + 0.5 - pc.y;
      if (dx * dx + dy * dy <= radius_px * radius_px) img.at(r, c, 0) = std::max(img.at(r, c, 0), value);
    }
  }
}

}  // namespace detail

inline constexpr double kArmIntensity = 0.8;
inline constexpr double kTargetIntensity = 1.0;
inline constexpr double kTargetRadiusPx = 2.0;

/// Links as 1-pixel lines, target as a filled disc, black background.
inline Tensor render_scene(const Scene& scene, const EnvParams& env) {
  Tensor img({env.image_rows, env.image_cols, 1});
  const auto joints = forward_kinematics(scene.arm, scene.state.theta);
  for (std::size_t k = 0; k + 1 < joints.size(); ++k)
    detail::draw_segment(img, env, joints[k], joints[k + 1], kArmIntensity);
  detail::draw_disc(img, env, scene.target, kTargetRadiusPx, kTargetIntensity);
  return img;
}

inline Tensor config_vector(const ArmModel& arm, const ArmState& state) {
  const std::size_t n = arm.joints();
  Tensor cfg({config_dim_for(n)});
  for (std::size_t j = 0; j < n; ++j) {
    cfg[j] = state.theta[j];
    cfg[n + j] = state.omega[j];
  }
  const Point2 ee = end_effector(arm, state.theta);
  const Point2 v = end_effector_velocity(arm, state);
  cfg[2 * n] = ee.x;
  cfg[2 * n + 1] = ee.y;
  cfg[2 * n + 2] = v.x;
  cfg[2 * n + 3] = v.y;
  return cfg;
}

inline Observation observe(const Scene& scene, const EnvParams& env) {
  return {render_scene(scene, env), config_vector(scene.arm, scene.state)};
}

/// Arm state as encoded in an observation's configuration vector.
inline ArmState state_from_config(const Tensor& config, std::size_t joints) {
  ArmState s;
  for (std::size_t j = 0; j < joints; ++j) {
    s.theta.push_back(config[j]);
    s.omega.push_back(config[joints + j]);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Dynamics

inline bool reached(const Scene& scene, const EnvParams& env) {
  return (end_effector(scene.arm, scene.state.theta) - scene.target).norm() < env.reach_threshold;
}

inline double clamp_torque(double tau, const EnvParams& env) {
  return std::clamp(tau, -env.torque_limit, env.torque_limit);
}

struct StepResult {
  Scene scene;
  Observation observation;
  bool reached = false;
};

/// Semi-implicit Euler on every joint with clamped torques.
inline StepResult env_step(const Scene& scene, const Tensor& torques, const EnvParams& env) {
  const std::size_t n = scene.arm.joints();
  if (torques.size() != n)
    throw ShapeError("env_step: " + std::to_string(torques.size()) + " torques for " +
                     std::to_string(n) + " joints");
  Scene next = scene;
  for (std::size_t j = 0; j < n; ++j) {
    next.state.omega[j] += clamp_torque(torques[j], env) / scene.arm.joint_inertias[j] * scene.arm.dt;
    next.state.theta[j] += next.state.omega[j] * scene.arm.dt;
  }
  Observation obs = observe(next, env);
  const bool done = reached(next, env);
  return {std::move(next), std::move(obs), done};
}

// ---------------------------------------------------------------------------
// Scripted expert

struct PdGains {
  double kp = 20.0;
  double kd = 6.0;
};

/// Jacobian-transpose PD controller toward the target.
inline Tensor pd_expert(const Scene& scene, const PdGains& gains) {
  const Point2 ee = end_effector(scene.arm, scene.state.theta);
  const Point2 v = end_effector_velocity(scene.arm, scene.state);
  const Point2 force = gains.kp * (scene.target - ee) - gains.kd * v;
  const auto cols = jacobian(scene.arm, scene.state.theta);
  Tensor tau({cols.size()});
  for (std::size_t j = 0; j < cols.size(); ++j) tau[j] = cols[j].x * force.x + cols[j].y * force.y;
  return tau;
}

struct Sample {
  Observation obs;
  Tensor torque;
};

struct Episode {
  std::vector<Sample> samples;
  std::size_t steps_to_reach = 0;  // 0 when never reached
  bool reached = false;
};

/// Rolls the expert for `steps` steps, recording clamped torques.
inline Episode run_expert_episode(Scene scene, const PdGains& gains, std::size_t steps,
                                  const EnvParams& env) {
  Episode ep;
  Observation obs = observe(scene, env);
  for (std::size_t t = 0; t < steps; ++t) {
    Tensor tau = pd_expert(scene, gains);
    for (double& v : tau.data()) v = clamp_torque(v, env);
    ep.samples.push_back({obs, tau});
    StepResult res = env_step(scene, tau, env);
    scene = std::move(res.scene);
    obs = std::move(res.observation);
    if (res.reached && !ep.reached) {
      ep.reached = true;
      ep.steps_to_reach = t + 1;
    }
  }
  return ep;
}

// ---------------------------------------------------------------------------
// Episode configuration

struct EpisodeConfig {
  std::vector<Point2> targets;
  std::vector<std::vector<double>> start_states;  // joint angles, arm at rest
  std::size_t steps = 100;
  std::uint64_t seed = 1;
  /// Uniform jitter added to start angles for episodes past the listed ones.
  double start_jitter = 0.3;
};

/// Four training targets spread around the workspace.
inline EpisodeConfig default_episode_config() {
  EpisodeConfig cfg;
  cfg.targets = {{0.55, 0.45}, {-0.45, 0.55}, {-0.5, -0.4}, {0.45, -0.5}};
  cfg.start_states = {{0.3, 1.2}, {1.8, 0.9}, {-1.4, 1.0}, {-0.3, -1.1}};
  return cfg;
}

inline EpisodeConfig episode_config_from_json(const nlohmann::json& j) {
  EpisodeConfig cfg = default_episode_config();
  try {
    if (j.contains("targets")) {
      cfg.targets.clear();
      for (const auto& t : j.at("targets")) cfg.targets.push_back({t.at(0).get<double>(), t.at(1).get<double>()});
    }
    if (j.contains("start_states")) {
      cfg.start_states.clear();
      for (const auto& s : j.at("start_states")) cfg.start_states.push_back(s.get<std::vector<double>>());
    }
    if (j.contains("steps")) cfg.steps = j.at("steps").get<std::size_t>();
    if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("start_jitter")) cfg.start_jitter = j.at("start_jitter").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("episode config: ") + e.what());
  }
  if (cfg.targets.empty()) throw ConfigError("episode config: no targets");
  if (cfg.start_states.empty()) throw ConfigError("episode config: no start states");
  return cfg;
}

inline nlohmann::json episode_config_to_json(const EpisodeConfig& cfg) {
  nlohmann::json j;
  for (const auto& t : cfg.targets) j["targets"].push_back({t.x, t.y});
  j["start_states"] = cfg.start_states;
  j["steps"] = cfg.steps;
  j["seed"] = cfg.seed;
  j["start_jitter"] = cfg.start_jitter;
  return j;
}

/// Start state for episode `k` of a target: listed states first, then seeded
/// jitter around them.
inline ArmState episode_start(const EpisodeConfig& cfg, std::size_t target_index, std::size_t k) {
  const std::size_t n_starts = cfg.start_states.size();
  std::vector<double> theta = cfg.start_states[k % n_starts];
  if (k >= n_starts) {
    std::mt19937_64 rng(cfg.seed * 1000003ULL + target_index * 7919ULL + k);
    std::uniform_real_distribution<double> jitter(-cfg.start_jitter, cfg.start_jitter);
    for (double& a : theta) a += jitter(rng);
  }
  return ArmState::at_rest(std::move(theta));
}

/// Expert demonstrations: `episodes_per_target` rollouts for every target.
inline std::vector<Sample> collect_dataset(const EpisodeConfig& cfg, std::size_t episodes_per_target,
                                           const ArmModel& arm, const PdGains& gains,
                                           const EnvParams& env) {
  std::vector<Sample> data;
  for (std::size_t ti = 0; ti < cfg.targets.size(); ++ti) {
    if (!target_reachable(arm, cfg.targets[ti]))
      throw ConfigError("target " + std::to_string(ti) + " is outside the reachable annulus");
    for (std::size_t k = 0; k < episodes_per_target; ++k) {
      Scene scene{arm, episode_start(cfg, ti, k), cfg.targets[ti]};
      Episode ep = run_expert_episode(scene, gains, cfg.steps, env);
      for (auto& s : ep.samples) data.push_back(std::move(s));
    }
  }
  return data;
}

// ---------------------------------------------------------------------------
// JSON-lines dataset

inline nlohmann::json observation_to_json(const Observation& obs) {
  nlohmann::json j;
  j["image_shape"] = obs.image.shape();
  j["image"] = obs.image.values();
  j["config"] = obs.config.values();
  return j;
}

inline Observation observation_from_json(const nlohmann::json& j) {
  try {
    Shape shape = j.at("image_shape").get<Shape>();
    return {Tensor(std::move(shape), j.at("image").get<std::vector<double>>()),
            Tensor::vector(j.at("config").get<std::vector<double>>())};
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("observation: ") + e.what());
  }
}

inline void write_dataset(const std::vector<Sample>& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open '" + path + "' for writing");
  for (const auto& s : data) {
    nlohmann::json j;
    j["obs"] = observation_to_json(s.obs);
    j["torque"] = s.torque.values();
    out << j.dump() << '\n';
  }
}

inline std::vector<Sample> read_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  std::vector<Sample> data;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      data.push_back({observation_from_json(j.at("obs")),
                      Tensor::vector(j.at("torque").get<std::vector<double>>())});
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("dataset line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return data;
}

}  // namespace pxray
