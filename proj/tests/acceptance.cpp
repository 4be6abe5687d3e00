// Acceptance run: one PASS/FAIL line per criterion. Exit status is nonzero
// only when a required criterion fails; diagnostics are reported, never fatal.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "pxray/cli.hpp"
#include "pxray/pxray.hpp"

using namespace pxray;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(const std::string& name, bool ok, const std::string& detail) {
  std::printf("%s %s: %s\n", ok ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++g_failures;
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string suite_detail(const SuiteReport& r) {
  std::ostringstream os;
  os << r.cases << " cases, " << r.failures << " failures, worst " << fmt("%.3g", r.worst_error) << ", "
     << fmt("%.2f", r.seconds) << " s";
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  for (std::string l; std::getline(is, l);) out.push_back(l);
  return out;
}

int cli(std::vector<std::string> args, std::string* out_text = nullptr) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  if (out_text) *out_text = out.str();
  if (code != 0) std::printf("  (pxray %s exited %d: %s)\n", args[0].c_str(), code, err.str().c_str());
  return code;
}

Dense dense(std::size_t in, std::size_t out, std::vector<double> w) {
  return Dense{Tensor({in, out}, std::move(w)), Tensor({out})};
}

bool near_all(const Tensor& got, const std::vector<double>& want, double tol) {
  if (got.size() != want.size()) return false;
  for (std::size_t i = 0; i < want.size(); ++i)
    if (!(std::abs(got[i] - want[i]) <= tol)) return false;
  return true;
}

// ---------------------------------------------------------------------------

void hand_fixtures() {
  DropCounter drops;
  const bool a = near_all(propagate_output_layer(dense(2, 1, {-1, -1}), Tensor::vector({1, 1}),
                                                 Tensor::vector({-2}), drops),
                          {1, 1}, 1e-12);
  const bool b = near_all(propagate_output_layer(dense(2, 2, {1, -1, 1, 1}), Tensor::vector({1, 2}),
                                                 Tensor::vector({3, 1}), drops),
                          {1, 3}, 1e-12);
  const bool c = near_all(propagate_input_layer(dense(2, 1, {-1, 1}), Tensor::vector({-1, 2}),
                                                Tensor::vector({3}), drops),
                          {1, 2}, 1e-12);
  const bool d = near_all(propagate_input_layer(dense(2, 1, {1, 1}), Tensor::vector({-1, 2}),
                                                Tensor::vector({1}), drops),
                          {0, 1}, 1e-12);
  std::ostringstream os;
  os << "output rule negative column " << (a ? "ok" : "mismatch") << ", output rule z+ columns "
     << (b ? "ok" : "mismatch") << ", signed-input mixed weights " << (c ? "ok" : "mismatch")
     << ", signed-input positive weights " << (d ? "ok" : "mismatch") << " (tol 1e-12)";
  report("hand_fixtures", a && b && c && d && drops.count == 0, os.str());
}

struct Reach {
  int reached = 0;
  std::string detail;
};

/// Closed-loop rollouts of the cloned policy from each canonical start.
Reach closed_loop_reach(const PolicyNetwork& net, std::size_t steps) {
  const EpisodeConfig cfg = default_episode_config();
  const EnvParams env;
  Reach out;
  std::ostringstream os;
  for (std::size_t ti = 0; ti < cfg.targets.size(); ++ti) {
    Scene scene{default_arm(), ArmState::at_rest(cfg.start_states[ti]), cfg.targets[ti]};
    std::size_t hit = 0;
    for (std::size_t t = 0; t < steps && !hit; ++t) {
      const Observation obs = observe(scene, env);
      StepResult r = env_step(scene, network_output(net, obs.image, obs.config), env);
      scene = std::move(r.scene);
      if (r.reached) hit = t + 1;
    }
    if (hit) ++out.reached;
    os << (ti ? ", " : "") << "target " << ti << (hit ? " reached at step " + std::to_string(hit) : " missed");
  }
  out.detail = os.str();
  return out;
}

bool valid_series_csv(const std::string& path, std::size_t steps, std::size_t methods, bool change,
                      std::string& why) {
  const auto lines = lines_of(read_text_file(path));
  std::size_t at = 0;
  if (change) {
    if (lines.empty() || lines[0].rfind("# change_step=", 0) != 0) return why = "missing change_step", false;
    at = 1;
  }
  if (lines.size() != at + 1 + steps * methods) return why = "row count " + std::to_string(lines.size()), false;
  if (lines[at] != kSeriesCsvHeader) return why = "bad header", false;
  for (std::size_t k = at + 1; k < lines.size(); ++k) {
    std::vector<std::string> f;
    std::stringstream ss(lines[k]);
    for (std::string item; std::getline(ss, item, ',');) f.push_back(item);
    if (f.size() != 10) return why = "field count on line " + std::to_string(k), false;
    double sum = 0.0;
    for (std::size_t g = 3; g < 8; ++g) {
      const double v = std::stod(f[g]);
      if (!(v >= 0.0 && v <= 1.0)) return why = "ratio outside [0,1]", false;
      sum += v;
    }
    if (std::stod(f[8]) > 0.0 && std::abs(sum - 1.0) > 1e-6) return why = "ratios do not sum to 1", false;
  }
  return true;
}

bool valid_pgm(const std::string& path, std::size_t w, std::size_t h) {
  try {
    const Pgm p = parse_pgm(read_text_file(path));
    if (p.width != w || p.height != h || p.max_value != 255) return false;
    for (int v : p.pixels)
      if (v < 0 || v > 255) return false;
    return true;
  } catch (const Error&) {
    return false;
  }
}

void end_to_end(const fs::path& work) {
  const std::string weights = (work / "policy.json").string();
  const auto t0 = std::chrono::steady_clock::now();
  const int clone_code = cli({"clone", "--episodes", "4", "--seed", "1", "--out", weights});
  const double clone_s = seconds_since(t0);
  if (clone_code != 0) {
    report("end_to_end", false, "clone failed");
    return;
  }
  const auto rep = nlohmann::json::parse(read_text_file(weights + ".report.json"));
  const double ratio = rep["loss_over_variance"].get<double>();
  const PolicyNetwork net = load_weights(weights);
  const Reach reach = closed_loop_reach(net, 400);

  const std::size_t steps = 100;
  const std::string series = (work / "series.csv").string();
  std::string rollout_out;
  const int roll_code = cli({"rollout", "--weights", weights, "--steps", std::to_string(steps), "--methods",
                             "dtd,rap,gbp", "--alpha", "kinematic", "--out", series, "--heatmap-dir",
                             (work / "heatmaps").string()},
                            &rollout_out);
  std::string why = "ok";
  bool csv_ok = roll_code == 0 && valid_series_csv(series, steps, 3, false, why);
  bool pgm_ok = roll_code == 0;
  for (const char* m : {"dtd", "rap", "gbp"}) {
    pgm_ok = pgm_ok && valid_pgm((work / "heatmaps" / (std::string(m) + "_t0_image.pgm")).string(), 32, 32);
    pgm_ok = pgm_ok && valid_pgm((work / "heatmaps" / (std::string(m) + "_t0_config.pgm")).string(), 8, 1);
  }
  std::ostringstream os;
  os << "clone " << fmt("%.1f", clone_s) << " s; reached " << reach.reached << "/4 within 400 steps ("
     << reach.detail << "); rollout CSV " << (csv_ok ? "valid" : "invalid: " + why) << "; PGM heatmaps "
     << (pgm_ok ? "valid" : "invalid");
  report("end_to_end", clone_s <= 300.0 && reach.reached >= 3 && csv_ok && pgm_ok, os.str());
  report("clone_fit", ratio < kCloneLossVarianceRatio,
         "training MSE / torque variance = " + fmt("%.4f", ratio) + " (threshold " +
             fmt("%.2f", kCloneLossVarianceRatio) + ")");

  // Diagnostics: reported with their expected-direction flags, never fatal.
  const std::string change_csv = (work / "target_change.csv").string();
  std::string change_out;
  const int change_code = cli({"rollout", "--weights", weights, "--steps", "100", "--methods", "dtd,rap,gbp",
                               "--target-change-step", "40", "--seed", "2", "--out", change_csv},
                              &change_out);
  std::string change_why = "ok";
  const bool change_csv_ok = change_code == 0 && valid_series_csv(change_csv, 100, 3, true, change_why);
  int logged = 0;
  for (const auto& l : lines_of(rollout_out + change_out))
    if (l.rfind("diagnostic ", 0) == 0) {
      std::printf("  %s\n", l.c_str());
      ++logged;
    }
  report("qualitative_diagnostics", roll_code == 0 && change_csv_ok && logged == 6,
         std::to_string(logged) + " diagnostics logged for review (expected-direction flags are informational)");
}

}  // namespace

int main() {
  const fs::path work = fs::current_path() / "acceptance_work";
  fs::remove_all(work);
  fs::create_directories(work);
  const std::uint64_t seed = 20261019;

  const SuiteReport conservation = run_conservation_suite(200, seed);
  report("conservation", conservation.passed() && conservation.cases >= 200 && conservation.seconds < 10.0,
         suite_detail(conservation) + ", tol 1e-6 relative");

  const SuiteReport reductions = run_reduction_suite(100, seed);
  report("reductions", reductions.passed() && reductions.cases >= 200,
         suite_detail(reductions) + " (100 signed-input + 100 output-rule, bit-exact)");

  const SuiteReport gradients = run_gradient_suite(100, seed);
  report("gradients", gradients.passed() && gradients.cases >= 100 && gradients.seconds < 30.0,
         suite_detail(gradients) + ", " + std::to_string(gradients.skipped) + " resampled near ReLU kinks");

  const SuiteReport conv = run_conv_unroll_suite(50, seed);
  report("conv_unroll", conv.passed() && conv.cases >= 50, suite_detail(conv) + " on 6x6 inputs, tol 1e-12");

  const SuiteReport kin = run_kinematics_suite(50, seed);
  report("kinematics", kin.passed() && kin.cases >= 51,
         suite_detail(kin) + " (fixture within 1e-3, random states within 5%)");

  hand_fixtures();
  end_to_end(work);

  std::printf("%s\n", g_failures ? "acceptance: FAILED" : "acceptance: all criteria passed");
  return g_failures ? 1 : 0;
}
