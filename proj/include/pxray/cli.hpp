#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pxray/analysis.hpp"
#include "pxray/attribution.hpp"
#include "pxray/checks.hpp"
#include "pxray/env_toy.hpp"
#include "pxray/errors.hpp"
#include "pxray/kinematics.hpp"
#include "pxray/training.hpp"
#include "pxray/weights_io.hpp"

namespace pxray::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitRuntime = 3;

/// Default seed: $PXRAY_SEED when set, else 1.
inline std::uint64_t default_seed() {
  if (const char* s = std::getenv("PXRAY_SEED")) {
    try {
      return std::stoull(s);
    } catch (const std::exception&) {
      throw ConfigError(std::string("PXRAY_SEED is not an integer: '") + s + "'");
    }
  }
  return 1;
}

inline nlohmann::json read_json_file(const std::string& path) {
  const std::string text = read_text_file(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("'" + path + "' is not valid JSON: " + e.what());
  }
}

inline ArmModel arm_from_json(const nlohmann::json& j) {
  ArmModel m;
  try {
    m.link_lengths = j.at("link_lengths").get<std::vector<double>>();
    m.joint_inertias = j.at("joint_inertias").get<std::vector<double>>();
    m.dt = j.value("dt", 0.01);
    if (j.contains("base_pose")) m.base_pose = {j["base_pose"].at(0).get<double>(), j["base_pose"].at(1).get<double>()};
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("arm file: ") + e.what());
  }
  validate(m);
  return m;
}

inline nlohmann::json arm_to_json(const ArmModel& m) {
  return {{"link_lengths", m.link_lengths},
          {"joint_inertias", m.joint_inertias},
          {"dt", m.dt},
          {"base_pose", {m.base_pose.x, m.base_pose.y}}};
}

inline std::vector<Method> parse_methods(const std::string& list) {
  std::vector<Method> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(parse_method(item));
  if (out.empty()) throw ConfigError("no methods given (valid: dtd, rap, gbp)");
  return out;
}

inline AlphaMode parse_alpha_mode(const std::string& s) {
  if (s == "kinematic") return AlphaMode::kinematic;
  if (s == "uniform") return AlphaMode::uniform;
  throw ConfigError("unknown alpha mode '" + s + "' (valid: kinematic, uniform)");
}

namespace detail {

/// Parses `args` (without the program or command name) into `app`.
inline void parse(CLI::App& app, const std::string& command, const std::vector<std::string>& args) {
  std::vector<std::string> storage{"pxray " + command};
  storage.insert(storage.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : storage) argv.push_back(s.data());
  app.parse(static_cast<int>(argv.size()), argv.data());
}

template <typename Fn>
int guarded(CLI::App& app, const std::string& command, const std::vector<std::string>& args,
            std::ostream& out, std::ostream& err, Fn&& body) {
  try {
    parse(app, command, args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n' << app.help();
    return kExitUsage;
  }
  try {
    return body();
  } catch (const TrainingError& e) {
    err << "training error: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ParseError& e) {
    err << "parse error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DimensionError& e) {
    err << "dimension error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const VersionError& e) {
    err << "version error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ShapeError& e) {
    err << "shape error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// clone

inline int cmd_clone(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Collect expert demonstrations and clone a visuomotor policy"};
  std::size_t episodes = 4;
  std::string targets_path, arch_path, out_path, report_path, dataset_path, arm_path, train_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  app.add_option("--episodes", episodes, "Expert episodes per target")->check(CLI::PositiveNumber);
  app.add_option("--targets", targets_path, "Episode config JSON (targets, start_states, steps, seed)");
  app.add_option("--seed", seed, "Seed for initialization and shuffling");
  app.add_option("--arch", arch_path, "Architecture JSON");
  app.add_option("--out", out_path, "Output weight file")->required();
  app.add_option("--report", report_path, "Training report JSON (default: <out>.report.json)");
  app.add_option("--dataset", dataset_path, "Also write the demonstrations as JSON lines");
  app.add_option("--arm", arm_path, "Arm description JSON");
  app.add_option("--train", train_path, "Training hyperparameters JSON");
  app.add_option("--epochs", epochs, "Override the number of training epochs");
  return detail::guarded(app, "clone", args, out, err, [&] {
    const EpisodeConfig cfg =
        targets_path.empty() ? default_episode_config() : episode_config_from_json(read_json_file(targets_path));
    const ArchSpec arch = arch_path.empty() ? ArchSpec{} : arch_from_json(read_json_file(arch_path));
    const ArmModel arm = arm_path.empty() ? default_arm() : arm_from_json(read_json_file(arm_path));
    TrainingParams hp = train_path.empty() ? TrainingParams{} : training_params_from_json(read_json_file(train_path));
    if (epochs) hp.epochs = *epochs;
    const std::uint64_t s = seed ? *seed : default_seed();
    const EnvParams env;
    const PdGains gains;

    const std::vector<Sample> data = collect_dataset(cfg, episodes, arm, gains, env);
    if (!dataset_path.empty()) write_dataset(data, dataset_path);
    TrainingReport rep;
    const PolicyNetwork net = clone_policy(data, arch, hp, s, &rep);
    save_weights(net, out_path);

    nlohmann::json report;
    report["seed"] = s;
    report["samples"] = rep.samples;
    report["episodes_per_target"] = episodes;
    report["final_loss"] = rep.final_loss;
    report["torque_variance"] = rep.torque_variance;
    report["loss_over_variance"] = rep.torque_variance > 0 ? rep.final_loss / rep.torque_variance : 0.0;
    report["epoch_loss"] = rep.epoch_loss;
    report["arch"] = arch_to_json(arch);
    report["training"] = training_params_to_json(hp);
    report["episode_config"] = episode_config_to_json(cfg);
    report["arm"] = arm_to_json(arm);
    write_text(report_path.empty() ? out_path + ".report.json" : report_path, report.dump(2) + "\n");
    out << "cloned policy: " << rep.samples << " samples, final MSE " << format_g9(rep.final_loss)
        << " (torque variance " << format_g9(rep.torque_variance) << ")\n";
    return kExitOk;
  });
}

// ---------------------------------------------------------------------------
// attribute

inline constexpr const char* kAttributeCsvHeader =
    "method,alpha_mode,image,joint_pos,joint_vel,ee_pos,ee_vel,input_total,dropped,output_total";

/// One row of signed group totals; input_total + dropped equals output_total
/// for the conserving methods.
inline std::string attribution_csv(const AttributionResult& r, AlphaMode mode) {
  std::ostringstream os;
  os << kAttributeCsvHeader << '\n' << method_name(r.method) << ',' << alpha_mode_name(mode);
  for (const auto& g : ratio_groups()) {
    auto it = r.group_totals.find(g);
    os << ',' << format_g9(it == r.group_totals.end() ? 0.0 : it->second);
  }
  os << ',' << format_g9(r.input_total()) << ',' << format_g9(r.drops.mass) << ','
     << format_g9(r.output_total) << '\n';
  return os.str();
}

inline int cmd_attribute(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Attribute one observation's torques to its inputs"};
  std::string weights, obs_path, method = "dtd", alpha = "kinematic", arm_path, heatmap, csv, config_heatmap;
  app.add_option("--weights", weights, "Weight file")->required();
  app.add_option("--obs", obs_path, "Observation JSON {image_shape, image, config}")->required();
  app.add_option("--method", method, "dtd | rap | gbp");
  app.add_option("--alpha", alpha, "kinematic | uniform");
  app.add_option("--arm", arm_path, "Arm description JSON (required for kinematic alpha)");
  app.add_option("--heatmap", heatmap, "Image relevance PGM");
  app.add_option("--csv", csv, "Group totals CSV");
  app.add_option("--config-heatmap", config_heatmap, "Configuration relevance PGM (a CSV is written beside it)");
  return detail::guarded(app, "attribute", args, out, err, [&] {
    const Method m = parse_method(method);
    const AlphaMode mode = parse_alpha_mode(alpha);
    if (mode == AlphaMode::kinematic && arm_path.empty())
      throw ConfigError("--alpha kinematic requires --arm");
    const PolicyNetwork net = load_weights(weights);
    const Observation obs = observation_from_json(read_json_file(obs_path));
    ImportanceFactors factors = ImportanceFactors::uniform(net.num_outputs());
    if (mode == AlphaMode::kinematic) {
      const ArmModel arm = arm_from_json(read_json_file(arm_path));
      if (arm.joints() != net.num_outputs())
        throw ConfigError("arm has " + std::to_string(arm.joints()) + " joints, policy has " +
                          std::to_string(net.num_outputs()) + " outputs");
      if (obs.config.size() < 2 * arm.joints())
        throw ConfigError("observation config too short for the arm state");
      factors = importance_factors(arm, state_from_config(obs.config, arm.joints()), mode);
    }
    const AttributionResult r = attribute(m, net, obs.image, obs.config, factors);
    const std::string table = attribution_csv(r, mode);
    if (!csv.empty()) write_text(csv, table);
    if (!heatmap.empty()) emit_heatmap(r, net, HeatmapKind::image, heatmap);
    if (!config_heatmap.empty()) emit_heatmap(r, net, HeatmapKind::config, config_heatmap);
    out << table;
    return kExitOk;
  });
}

// ---------------------------------------------------------------------------
// rollout

inline int cmd_rollout(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Roll a policy out in the toy environment and attribute every step"};
  std::string weights, methods = "dtd,rap,gbp", alpha = "kinematic", out_path, arm_path, episode_path,
                       heatmap_dir;
  std::size_t steps = 100, target_index = 0, start_index = 0;
  std::optional<std::size_t> change_step;
  std::optional<std::uint64_t> seed;
  bool freeze_alpha = false;
  app.add_option("--weights", weights, "Weight file")->required();
  app.add_option("--steps", steps, "Number of policy steps");
  app.add_option("--methods", methods, "Comma-separated subset of dtd,rap,gbp");
  app.add_option("--alpha", alpha, "kinematic | uniform");
  app.add_option("--out", out_path, "Series CSV")->required();
  app.add_option("--target-change-step", change_step, "Replace the target before this step");
  app.add_option("--arm", arm_path, "Arm description JSON (default: toy arm)");
  app.add_option("--episode", episode_path, "Episode config JSON (targets, start_states)");
  app.add_option("--target-index", target_index, "Which target of the episode config to reach");
  app.add_option("--start-index", start_index, "Which start state of the episode config to use");
  app.add_option("--seed", seed, "Seed for the new-target draw");
  app.add_option("--heatmap-dir", heatmap_dir, "Write t=0 heatmaps per method into this directory");
  app.add_flag("--freeze-alpha", freeze_alpha, "Compute alpha once at t=0");
  return detail::guarded(app, "rollout", args, out, err, [&] {
    AnalysisOptions opt;
    opt.methods = parse_methods(methods);
    opt.alpha_mode = parse_alpha_mode(alpha);
    opt.steps = steps;
    opt.freeze_alpha = freeze_alpha;
    const PolicyNetwork net = load_weights(weights);
    const EpisodeConfig cfg =
        episode_path.empty() ? default_episode_config() : episode_config_from_json(read_json_file(episode_path));
    const ArmModel arm = arm_path.empty() ? default_arm() : arm_from_json(read_json_file(arm_path));
    if (target_index >= cfg.targets.size()) throw ConfigError("--target-index out of range");
    if (start_index >= cfg.start_states.size()) throw ConfigError("--start-index out of range");
    if (arm.joints() != net.num_outputs()) throw ConfigError("arm joint count does not match the policy");
    const Scene scene{arm, ArmState::at_rest(cfg.start_states[start_index]), cfg.targets[target_index]};
    if (scene.state.theta.size() != arm.joints()) throw ConfigError("start state length does not match the arm");
    const EnvParams env;
    if (net.image_shape != Shape{env.image_rows, env.image_cols, 1})
      throw ConfigError("policy image shape " + shape_str(net.image_shape) + " does not match the toy renderer");

    const RolloutAnalysis res =
        change_step ? target_change_experiment(net, scene, env, opt, *change_step,
                                               random_between_targets(cfg.targets, seed ? *seed : default_seed()))
                    : run_trajectory_analysis(net, scene, env, opt);
    write_text(out_path, series_to_csv(res.series));
    if (!heatmap_dir.empty() && !res.first_step.empty()) {
      std::filesystem::create_directories(heatmap_dir);
      for (const auto& r : res.first_step) {
        const std::string stem = heatmap_dir + "/" + method_name(r.method) + "_t0";
        emit_heatmap(r, net, HeatmapKind::image, stem + "_image.pgm");
        emit_heatmap(r, net, HeatmapKind::config, stem + "_config.pgm");
      }
    }
    out << "rollout: " << steps << " steps, target " << (res.reached ? "reached" : "not reached") << '\n';
    for (const auto& s : res.series) {
      if (s.steps.empty()) continue;
      const auto summary = static_summary(s);
      out << method_name(s.method) << " mean ratios:";
      for (const auto& g : ratio_groups()) out << ' ' << g << '=' << format_g9(summary.at(g).mean);
      out << '\n';
      const Diagnostic d = change_step ? target_change_diagnostic(s) : initial_image_diagnostic(s);
      out << "diagnostic " << d.name << " expected_direction=" << (d.expected_direction ? "yes" : "no")
          << " (" << d.detail << ")\n";
    }
    return kExitOk;
  });
}

// ---------------------------------------------------------------------------
// check

inline void print_report(std::ostream& out, const SuiteReport& r) {
  out << (r.passed() ? "PASS " : "FAIL ") << r.name << ": " << r.cases << " cases, " << r.failures
      << " failures, worst error " << format_g9(r.worst_error);
  if (r.skipped) out << ", " << r.skipped << " resampled";
  out << ", " << format_g9(r.seconds) << " s\n";
}

inline int cmd_check(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Run the oracle property suites"};
  std::string suite = "all";
  std::size_t trials = 200;
  std::optional<std::uint64_t> seed;
  bool inject_fault = false;
  app.add_option("--suite", suite, "conservation | gradients | kinematics | reductions | conv | all");
  app.add_option("--trials", trials, "Random cases per suite");
  app.add_option("--seed", seed, "Suite seed");
#ifdef PXRAY_FAULT_INJECTION
  app.add_flag("--inject-fault", inject_fault, "Use a deliberately broken output rule");
#endif
  return detail::guarded(app, "check", args, out, err, [&] {
    if (trials == 0) throw ConfigError("--trials must be at least 1");
    const std::uint64_t s = seed ? *seed : default_seed();
    const Fault fault = inject_fault ? Fault::output_rule_ignores_sign : Fault::none;
    const bool all = suite == "all";
    std::vector<SuiteReport> reports;
    if (all || suite == "conservation") reports.push_back(run_conservation_suite(trials, s, fault));
    if (all || suite == "gradients") reports.push_back(run_gradient_suite(trials, s));
    if (all || suite == "kinematics") reports.push_back(run_kinematics_suite(trials, s));
    if (all || suite == "reductions") reports.push_back(run_reduction_suite(trials, s));
    if (all || suite == "conv") reports.push_back(run_conv_unroll_suite(trials, s));
    if (reports.empty())
      throw ConfigError("unknown suite '" + suite + "' (valid: conservation, gradients, kinematics, reductions, conv, all)");
    bool ok = true;
    for (const auto& r : reports) {
      print_report(out, r);
      ok = ok && r.passed();
    }
    return ok ? kExitOk : kExitRuntime;
  });
}

// ---------------------------------------------------------------------------

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  static const char* usage =
      "usage: pxray <command> [options]\n"
      "commands:\n"
      "  clone      collect expert demonstrations and clone a policy\n"
      "  attribute  attribute one observation (dtd | rap | gbp)\n"
      "  rollout    attribute every step of a policy rollout\n"
      "  check      run the oracle property suites\n";
  if (args.empty()) {
    err << usage;
    return kExitUsage;
  }
  const std::string& cmd = args.front();
  const std::vector<std::string> rest(args.begin() + 1, args.end());
  if (cmd == "clone") return cmd_clone(rest, out, err);
  if (cmd == "attribute") return cmd_attribute(rest, out, err);
  if (cmd == "rollout") return cmd_rollout(rest, out, err);
  if (cmd == "check") return cmd_check(rest, out, err);
  if (cmd == "-h" || cmd == "--help") {
    out << usage;
    return kExitOk;
  }
  err << "unknown command '" << cmd << "'\n" << usage;
  return kExitUsage;
}

}  // namespace pxray::cli
