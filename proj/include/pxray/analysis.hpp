#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "pxray/attribution.hpp"
#include "pxray/env_toy.hpp"
#include "pxray/errors.hpp"
#include "pxray/kinematics.hpp"
#include "pxray/network.hpp"

namespace pxray {

/// Group order used in every report and CSV row.
inline const std::vector<std::string>& ratio_groups() {
  static const std::vector<std::string> groups{"image", "joint_pos", "joint_vel", "ee_pos", "ee_vel"};
  return groups;
}

using GroupMap = std::map<std::string, double>;

namespace detail {

inline GroupMap normalize_groups(const GroupMap& totals) {
  GroupMap out;
  double denom = 0.0;
  for (const auto& g : ratio_groups()) {
    auto it = totals.find(g);
    if (it != totals.end()) denom += it->second;
  }
  for (const auto& g : ratio_groups()) {
    auto it = totals.find(g);
    out[g] = (denom != 0.0 && it != totals.end()) ? it->second / denom : 0.0;
  }
  return out;
}

}  // namespace detail

/// Share of non-dropped relevance per input group, from absolute group sums.
inline GroupMap group_ratios(const AttributionResult& result) {
  return detail::normalize_groups(result.group_abs_totals);
}

/// Same, from signed group sums. Entries may leave [0, 1] when groups carry
/// relevance of opposite signs.
inline GroupMap group_ratios_signed(const AttributionResult& result) {
  return detail::normalize_groups(result.group_totals);
}

struct TimeStep {
  std::size_t t = 0;
  GroupMap ratios;
  GroupMap signed_ratios;
  GroupMap group_totals;
  double total = 0.0;    // non-dropped relevance, sum of |R| over groups
  double dropped = 0.0;
  double output_total = 0.0;
};

struct RelevanceTimeSeries {
  Method method = Method::dtd;
  AlphaMode alpha_mode = AlphaMode::kinematic;
  std::vector<TimeStep> steps;
  std::optional<std::size_t> change_step;

  std::size_t size() const { return steps.size(); }
};

inline TimeStep make_time_step(std::size_t t, const AttributionResult& r) {
  TimeStep s;
  s.t = t;
  s.ratios = group_ratios(r);
  s.signed_ratios = group_ratios_signed(r);
  s.group_totals = r.group_totals;
  for (const auto& g : ratio_groups()) {
    auto it = r.group_abs_totals.find(g);
    if (it != r.group_abs_totals.end()) s.total += it->second;
  }
  s.dropped = r.drops.mass;
  s.output_total = r.output_total;
  return s;
}

struct GroupStats {
  double mean = 0.0;
  double std = 0.0;
};

/// Population mean and standard deviation of each group's ratio over time.
inline std::map<std::string, GroupStats> static_summary(const RelevanceTimeSeries& series) {
  std::map<std::string, GroupStats> out;
  const double n = static_cast<double>(series.steps.size());
  for (const auto& g : ratio_groups()) {
    GroupStats st;
    if (!series.steps.empty()) {
      for (const auto& s : series.steps) st.mean += s.ratios.at(g);
      st.mean /= n;
      double var = 0.0;
      for (const auto& s : series.steps) var += (s.ratios.at(g) - st.mean) * (s.ratios.at(g) - st.mean);
      st.std = std::sqrt(var / n);
    }
    out[g] = st;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Policy rollouts

struct AnalysisOptions {
  AlphaMode alpha_mode = AlphaMode::kinematic;
  std::vector<Method> methods{Method::dtd, Method::rap, Method::gbp};
  std::size_t steps = 100;
  /// Compute alpha once at t = 0 instead of every step.
  bool freeze_alpha = false;
};

/// Replaces the scene target; called once at the change step.
using TargetRule = std::function<Point2(const Scene&)>;

struct RolloutAnalysis {
  std::vector<RelevanceTimeSeries> series;  // one per requested method
  std::vector<AttributionResult> first_step;  // attribution at t = 0, per method
  Scene final_scene;
  bool reached = false;
};

namespace detail {

inline RolloutAnalysis analyze_rollout(const PolicyNetwork& net, Scene scene, const EnvParams& env,
                                       const AnalysisOptions& opt, std::optional<std::size_t> change_step,
                                       const TargetRule& rule) {
  RolloutAnalysis out;
  for (Method m : opt.methods) {
    RelevanceTimeSeries s;
    s.method = m;
    s.alpha_mode = opt.alpha_mode;
    s.change_step = change_step;
    out.series.push_back(std::move(s));
  }
  std::optional<ImportanceFactors> frozen;
  for (std::size_t t = 0; t < opt.steps; ++t) {
    if (change_step && *change_step == t && rule) scene.target = rule(scene);
    const Observation obs = observe(scene, env);
    ImportanceFactors alpha;
    if (opt.freeze_alpha && frozen) {
      alpha = *frozen;
    } else {
      alpha = importance_factors(scene.arm, scene.state, opt.alpha_mode);
      frozen = alpha;
    }
    for (std::size_t k = 0; k < opt.methods.size(); ++k) {
      AttributionResult r = attribute(opt.methods[k], net, obs.image, obs.config, alpha);
      out.series[k].steps.push_back(make_time_step(t, r));
      if (t == 0) out.first_step.push_back(std::move(r));
    }
    const Tensor tau = network_output(net, obs.image, obs.config);
    StepResult res = env_step(scene, tau, env);
    scene = std::move(res.scene);
    out.reached = out.reached || res.reached;
  }
  out.final_scene = std::move(scene);
  return out;
}

}  // namespace detail

/// Rolls the policy out and attributes every step with every method.
inline RolloutAnalysis run_trajectory_analysis(const PolicyNetwork& net, const Scene& scene,
                                               const EnvParams& env, const AnalysisOptions& opt) {
  return detail::analyze_rollout(net, scene, env, opt, std::nullopt, {});
}

/// Like run_trajectory_analysis, but the target is replaced by `rule` just
/// before step `change_step` is observed.
inline RolloutAnalysis target_change_experiment(const PolicyNetwork& net, const Scene& scene,
                                                const EnvParams& env, const AnalysisOptions& opt,
                                                std::size_t change_step, const TargetRule& rule) {
  return detail::analyze_rollout(net, scene, env, opt, change_step, rule);
}

/// New target at a random point between two distinct training targets,
/// pulled back into the arm's reachable annulus.
inline TargetRule random_between_targets(std::vector<Point2> targets, std::uint64_t seed) {
  return [targets = std::move(targets), seed](const Scene& scene) {
    if (targets.size() < 2) return scene.target;
    std::mt19937_64 rng(seed);
    const std::size_t a = rng() % targets.size();
    std::size_t b = rng() % (targets.size() - 1);
    if (b >= a) ++b;
    std::uniform_real_distribution<double> u(0.25, 0.75);
    const double lam = u(rng);
    Point2 p = targets[a] + lam * (targets[b] - targets[a]);
    const Point2 base = scene.arm.base_pose;
    double r = (p - base).norm();
    const double lo = scene.arm.joints() == 2
                          ? std::abs(scene.arm.link_lengths[0] - scene.arm.link_lengths[1])
                          : 0.0;
    const double inner = lo + 0.1 * (scene.arm.reach() - lo);
    if (r < inner) {
      const Point2 dir = r > 0.0 ? (1.0 / r) * (p - base) : Point2{1.0, 0.0};
      p = base + inner * dir;
    }
    return p;
  };
}

// ---------------------------------------------------------------------------
// Diagnostics

struct Diagnostic {
  std::string name;
  bool expected_direction = false;
  std::string detail;
};

/// Whether the image ratio at t = 0 exceeds its trajectory mean.
inline Diagnostic initial_image_diagnostic(const RelevanceTimeSeries& s) {
  Diagnostic d{"initial_image_ratio_high", false, "empty series"};
  if (s.steps.empty()) return d;
  const double first = s.steps.front().ratios.at("image");
  const double mean = static_summary(s).at("image").mean;
  d.expected_direction = first > mean;
  char buf[160];
  std::snprintf(buf, sizeof buf, "method=%s image[t=0]=%.4f mean=%.4f", method_name(s.method), first, mean);
  d.detail = buf;
  return d;
}

/// Largest ratio jump across the change step compared with the median jump
/// elsewhere in the series.
inline Diagnostic target_change_diagnostic(const RelevanceTimeSeries& s) {
  Diagnostic d{"target_change_discontinuity", false, "no change step in range"};
  if (!s.change_step || *s.change_step == 0 || *s.change_step >= s.steps.size()) return d;
  auto jump = [&](std::size_t t) {
    double m = 0.0;
    for (const auto& g : ratio_groups())
      m = std::max(m, std::abs(s.steps[t].ratios.at(g) - s.steps[t - 1].ratios.at(g)));
    return m;
  };
  const std::size_t k = *s.change_step;
  const double at_change = std::max(jump(k), k + 1 < s.steps.size() ? jump(k + 1) : 0.0);
  std::vector<double> others;
  for (std::size_t t = 1; t < s.steps.size(); ++t)
    if (t != k && t != k + 1) others.push_back(jump(t));
  double median = 0.0;
  if (!others.empty()) {
    std::nth_element(others.begin(), others.begin() + others.size() / 2, others.end());
    median = others[others.size() / 2];
  }
  d.expected_direction = at_change > median;
  char buf[200];
  std::snprintf(buf, sizeof buf, "method=%s change_step=%zu jump=%.4f median_jump=%.4f pos_ratio %.4f -> %.4f",
                method_name(s.method), k, at_change, median, s.steps[k - 1].ratios.at("joint_pos"),
                s.steps[k].ratios.at("joint_pos"));
  d.detail = buf;
  return d;
}

// ---------------------------------------------------------------------------
// Output files

inline std::string format_g9(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline constexpr const char* kSeriesCsvHeader =
    "t,method,alpha_mode,image,joint_pos,joint_vel,ee_pos,ee_vel,total,dropped";

/// One row per (t, method); rows for a timestep are adjacent.
inline std::string series_to_csv(const std::vector<RelevanceTimeSeries>& series) {
  std::ostringstream os;
  std::optional<std::size_t> change;
  for (const auto& s : series)
    if (s.change_step) change = s.change_step;
  if (change) os << "# change_step=" << *change << '\n';
  os << kSeriesCsvHeader << '\n';
  std::size_t steps = 0;
  for (const auto& s : series) steps = std::max(steps, s.steps.size());
  for (std::size_t t = 0; t < steps; ++t) {
    for (const auto& s : series) {
      if (t >= s.steps.size()) continue;
      const TimeStep& ts = s.steps[t];
      os << ts.t << ',' << method_name(s.method) << ',' << alpha_mode_name(s.alpha_mode);
      for (const auto& g : ratio_groups()) os << ',' << format_g9(ts.ratios.at(g));
      os << ',' << format_g9(ts.total) << ',' << format_g9(ts.dropped) << '\n';
    }
  }
  return os.str();
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw ConfigError("failed writing '" + path + "'");
}

struct Pgm {
  std::size_t width = 0;
  std::size_t height = 0;
  int max_value = 255;
  std::vector<int> pixels;  // row-major
};

/// Linear map of `values` onto 0..255 (min -> 0, max -> 255); a constant
/// field maps to all zeros.
inline Pgm scale_to_pgm(const std::vector<double>& values, std::size_t height, std::size_t width) {
  Pgm p{width, height, 255, std::vector<int>(values.size(), 0)};
  if (values.empty()) return p;
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) return p;
  for (std::size_t k = 0; k < values.size(); ++k)
    p.pixels[k] = static_cast<int>(std::lround(255.0 * (values[k] - lo) / (hi - lo)));
  return p;
}

inline std::string pgm_to_string(const Pgm& p) {
  std::ostringstream os;
  os << "P2\n" << p.width << ' ' << p.height << '\n' << p.max_value << '\n';
  for (std::size_t r = 0; r < p.height; ++r) {
    for (std::size_t c = 0; c < p.width; ++c) os << (c ? " " : "") << p.pixels[r * p.width + c];
    os << '\n';
  }
  return os.str();
}

inline Pgm parse_pgm(const std::string& text) {
  std::istringstream is(text);
  std::string magic;
  Pgm p;
  is >> magic >> p.width >> p.height >> p.max_value;
  if (magic != "P2" || !is) throw ParseError("not an ASCII PGM (P2) file");
  p.pixels.resize(p.width * p.height);
  for (int& v : p.pixels)
    if (!(is >> v)) throw ParseError("PGM: truncated pixel data");
  return p;
}

/// Image relevance summed over channels.
inline std::vector<double> image_relevance_map(const AttributionResult& r) {
  const Tensor& img = r.image_relevance;
  const std::size_t h = img.dim(0), w = img.dim(1), c_n = img.dim(2);
  std::vector<double> out(h * w, 0.0);
  for (std::size_t p = 0; p < h * w; ++p)
    for (std::size_t c = 0; c < c_n; ++c) out[p] += img[p * c_n + c];
  return out;
}

inline void emit_image_heatmap(const AttributionResult& r, const std::string& path) {
  write_text(path, pgm_to_string(scale_to_pgm(image_relevance_map(r), r.image_relevance.dim(0),
                                              r.image_relevance.dim(1))));
}

/// Feature names like joint_pos_0, ee_vel_1 following the network's groups.
inline std::vector<std::string> config_feature_names(const PolicyNetwork& net) {
  std::vector<std::string> names(net.config_dim);
  for (const auto& g : net.input_groups)
    for (std::size_t k = g.lo; k < g.hi; ++k) names[k] = g.name + "_" + std::to_string(k - g.lo);
  return names;
}

/// Single-row PGM plus a (feature_name, relevance) CSV.
inline void emit_config_heatmap(const AttributionResult& r, const PolicyNetwork& net,
                                const std::string& pgm_path, const std::string& csv_path) {
  const auto& vals = r.config_relevance.values();
  write_text(pgm_path, pgm_to_string(scale_to_pgm(vals, 1, vals.size())));
  std::ostringstream os;
  os << "feature_name,relevance\n";
  const auto names = config_feature_names(net);
  for (std::size_t k = 0; k < vals.size(); ++k) os << names[k] << ',' << format_g9(vals[k]) << '\n';
  write_text(csv_path, os.str());
}

enum class HeatmapKind { image, config };

inline void emit_heatmap(const AttributionResult& r, const PolicyNetwork& net, HeatmapKind which,
                         const std::string& path) {
  if (which == HeatmapKind::image) {
    emit_image_heatmap(r, path);
  } else {
    std::string csv = path;
    const auto dot = csv.rfind('.');
    csv = (dot == std::string::npos ? csv : csv.substr(0, dot)) + ".csv";
    emit_config_heatmap(r, net, path, csv);
  }
}

}  // namespace pxray
