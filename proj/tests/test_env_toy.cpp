#include <gtest/gtest.h>

#include <cmath>

#include "fixtures.hpp"

using namespace pxray;

namespace {

Scene scene_at(std::vector<double> theta, Point2 target) {
  return {default_arm(), ArmState::at_rest(std::move(theta)), target};
}

// Small images keep cloning tests fast.
EnvParams small_env() {
  EnvParams env;
  env.image_rows = 12;
  env.image_cols = 12;
  return env;
}

ArchSpec small_arch() {
  ArchSpec a;
  a.conv = {{3, 4, 2, Padding::valid}};
  a.hidden = {16};
  return a;
}

}  // namespace

TEST(Render, OffCanvasSceneIsBlank) {
  Scene s = scene_at({0.0, 0.0}, {10.0, 10.0});
  s.arm.base_pose = {10.0, 10.0};
  EXPECT_EQ(render_scene(s, EnvParams{}).abs_sum(), 0.0);
}

TEST(Render, DeterministicAndInUnitRange) {
  const Scene s = scene_at({0.3, 1.2}, {0.55, 0.45});
  const Tensor a = render_scene(s, EnvParams{});
  EXPECT_EQ(a, render_scene(s, EnvParams{}));
  EXPECT_EQ(a.shape(), (Shape{32, 32, 1}));
  for (double v : a.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_GT(a.abs_sum(), 0.0);
}

TEST(Render, CenteredTargetLandsOnCenterPixel) {
  Scene s = scene_at({0.0, 0.0}, {0.0, 0.0});
  s.arm.base_pose = {10.0, 10.0};  // arm off canvas
  const EnvParams env;
  const Tensor img = render_scene(s, env);
  // World origin maps to continuous pixel (16, 16): the disc is centered on
  // the corner shared by pixels 15 and 16.
  double sr = 0, sc = 0, n = 0;
  for (size_t r = 0; r < 32; ++r)
    for (size_t c = 0; c < 32; ++c)
      if (img.at(r, c, 0) == kTargetIntensity) {
        sr += r + 0.5;
        sc += c + 0.5;
        n += 1;
      }
  ASSERT_GT(n, 0);
  EXPECT_NEAR(sr / n, 16.0, 1.0);
  EXPECT_NEAR(sc / n, 16.0, 1.0);
  EXPECT_EQ(img.at(15, 15, 0), kTargetIntensity);
  EXPECT_EQ(img.at(16, 16, 0), kTargetIntensity);
}

TEST(Render, ArmUsesArmIntensity) {
  const Scene s = scene_at({0.0, 0.0}, {10.0, 10.0});
  const Tensor img = render_scene(s, EnvParams{});
  double mx = 0.0;
  for (double v : img.data()) mx = std::max(mx, v);
  EXPECT_EQ(mx, kArmIntensity);
}

TEST(Observation, ConfigLayoutMatchesGroups) {
  ArmState st{{0.3, -0.4}, {0.5, 0.2}};
  const Scene s{default_arm(), st, {0.5, 0.5}};
  const Observation obs = observe(s, EnvParams{});
  const auto groups = config_groups(2);
  ASSERT_EQ(obs.config.size(), config_dim_for(2));
  EXPECT_EQ(groups.back().hi, obs.config.size());
  EXPECT_EQ(obs.config[0], 0.3);
  EXPECT_EQ(obs.config[3], 0.2);
  const Point2 ee = end_effector(s.arm, st.theta);
  EXPECT_EQ(obs.config[4], ee.x);
  EXPECT_EQ(obs.config[5], ee.y);
  EXPECT_EQ(state_from_config(obs.config, 2), st);
}

TEST(Step, ZeroTorqueFromRestIsFixedPoint) {
  const Scene s = scene_at({0.7, -0.2}, {0.5, 0.5});
  const StepResult r = env_step(s, Tensor({2}), EnvParams{});
  EXPECT_EQ(r.scene.state, s.state);
}

TEST(Step, ArmAtTargetIsReached) {
  const ArmModel arm = default_arm();
  const Point2 ee = end_effector(arm, {0.4, 0.9});
  const StepResult r = env_step(scene_at({0.4, 0.9}, ee), Tensor({2}), EnvParams{});
  EXPECT_TRUE(r.reached);
}

TEST(Step, ConstantTorqueMatchesClosedForm) {
  Scene s = scene_at({0.1, -0.3}, {0.5, 0.5});
  s.state.omega = {0.2, -0.1};
  const Tensor tau = Tensor::vector({1.5, -0.75});
  const EnvParams env;
  const ArmState s0 = s.state;
  for (int k = 0; k < 100; ++k) s = env_step(s, tau, env).scene;
  const double dt = s.arm.dt;
  const double n = 100;
  for (size_t j = 0; j < 2; ++j) {
    const double a = tau[j] / s.arm.joint_inertias[j];
    EXPECT_NEAR(s.state.omega[j], s0.omega[j] + n * a * dt, 1e-9);
    EXPECT_NEAR(s.state.theta[j], s0.theta[j] + n * s0.omega[j] * dt + a * dt * dt * n * (n + 1) / 2, 1e-9);
  }
}

TEST(Step, TorquesAreClamped) {
  const Scene s = scene_at({0.0, 0.0}, {0.5, 0.5});
  const EnvParams env;
  const auto big = env_step(s, Tensor::vector({100.0, -100.0}), env).scene;
  const auto lim = env_step(s, Tensor::vector({env.torque_limit, -env.torque_limit}), env).scene;
  EXPECT_EQ(big.state, lim.state);
}

TEST(Expert, ZeroAtRestOnTarget) {
  const ArmModel arm = default_arm();
  const Tensor tau = pd_expert(scene_at({0.4, 0.9}, end_effector(arm, {0.4, 0.9})), PdGains{});
  EXPECT_EQ(tau.abs_sum(), 0.0);
}

TEST(Expert, LinearInKp) {
  const Scene s = scene_at({0.4, 0.9}, {-0.3, 0.6});
  const Tensor a = pd_expert(s, PdGains{10.0, 0.0});
  const Tensor b = pd_expert(s, PdGains{30.0, 0.0});
  for (size_t j = 0; j < 2; ++j) EXPECT_NEAR(b[j], 3.0 * a[j], 1e-12);
}

TEST(Expert, ReachesEveryCanonicalTarget) {
  const EpisodeConfig cfg = default_episode_config();
  for (size_t ti = 0; ti < cfg.targets.size(); ++ti) {
    const Scene s{default_arm(), ArmState::at_rest(cfg.start_states[ti]), cfg.targets[ti]};
    const Episode ep = run_expert_episode(s, PdGains{}, 400, EnvParams{});
    EXPECT_TRUE(ep.reached) << "target " << ti;
    EXPECT_LE(ep.steps_to_reach, 400u);
  }
}

TEST(Scene, ReachableAnnulus) {
  const ArmModel arm = default_arm();
  EXPECT_TRUE(target_reachable(arm, {0.5, 0.5}));
  EXPECT_FALSE(target_reachable(arm, {0.05, 0.0}));
  EXPECT_FALSE(target_reachable(arm, {1.2, 0.0}));
}

TEST(Dataset, CollectsEveryEpisodeDeterministically) {
  EpisodeConfig cfg = default_episode_config();
  cfg.steps = 10;
  const auto a = collect_dataset(cfg, 5, default_arm(), PdGains{}, small_env());
  const auto b = collect_dataset(cfg, 5, default_arm(), PdGains{}, small_env());
  ASSERT_EQ(a.size(), 4u * 5u * 10u);
  for (size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].torque, b[i].torque);
    EXPECT_EQ(a[i].obs.config, b[i].obs.config);
  }
  // The fifth episode per target starts from jittered angles.
  EXPECT_NE(a[40].obs.config, a[0].obs.config);
}

TEST(Dataset, RejectsUnreachableTarget) {
  EpisodeConfig cfg = default_episode_config();
  cfg.targets.push_back({3.0, 0.0});
  EXPECT_THROW(collect_dataset(cfg, 1, default_arm(), PdGains{}, small_env()), ConfigError);
}

TEST(Dataset, JsonLinesRoundTrip) {
  EpisodeConfig cfg = default_episode_config();
  cfg.steps = 3;
  const auto data = collect_dataset(cfg, 1, default_arm(), PdGains{}, small_env());
  const auto path = (test::scratch_dir("dataset") / "d.jsonl").string();
  write_dataset(data, path);
  const auto back = read_dataset(path);
  ASSERT_EQ(back.size(), data.size());
  for (size_t i = 0; i < data.size(); ++i) {
    EXPECT_EQ(back[i].torque, data[i].torque);
    EXPECT_EQ(back[i].obs.image, data[i].obs.image);
    EXPECT_EQ(back[i].obs.config, data[i].obs.config);
  }
}

TEST(EpisodeConfig, JsonRoundTrip) {
  EpisodeConfig cfg = default_episode_config();
  cfg.steps = 77;
  cfg.seed = 5;
  const EpisodeConfig back = episode_config_from_json(episode_config_to_json(cfg));
  EXPECT_EQ(back.steps, 77u);
  EXPECT_EQ(back.seed, 5u);
  ASSERT_EQ(back.targets.size(), cfg.targets.size());
  EXPECT_EQ(back.targets[2], cfg.targets[2]);
  EXPECT_EQ(back.start_states, cfg.start_states);
  EXPECT_THROW(episode_config_from_json(nlohmann::json{{"targets", nlohmann::json::array()}}), ConfigError);
}

TEST(Clone, MemorizesIdenticalPairs) {
  const Scene s = scene_at({0.3, 1.2}, {0.55, 0.45});
  const Observation obs = observe(s, small_env());
  std::vector<Sample> data(16, Sample{obs, Tensor::vector({1.25, -0.5})});
  TrainingParams hp;
  hp.epochs = 200;
  hp.batch_size = 8;
  hp.lr_decay = 1.0;
  TrainingReport rep;
  const PolicyNetwork net = clone_policy(data, small_arch(), hp, 3, &rep);
  EXPECT_LT(rep.final_loss, 1e-6);
  const Tensor y = network_output(net, obs.image, obs.config);
  EXPECT_NEAR(y[0], 1.25, 1e-3);
  EXPECT_NEAR(y[1], -0.5, 1e-3);
}

TEST(Clone, SameSeedGivesIdenticalWeights) {
  EpisodeConfig cfg = default_episode_config();
  cfg.steps = 15;
  const auto data = collect_dataset(cfg, 1, default_arm(), PdGains{}, small_env());
  TrainingParams hp;
  hp.epochs = 3;
  const PolicyNetwork a = clone_policy(data, small_arch(), hp, 7);
  const PolicyNetwork b = clone_policy(data, small_arch(), hp, 7);
  const PolicyNetwork c = clone_policy(data, small_arch(), hp, 8);
  EXPECT_EQ(weights_to_json(a), weights_to_json(b));
  EXPECT_NE(weights_to_json(a), weights_to_json(c));
}

TEST(Clone, LossDecreases) {
  EpisodeConfig cfg = default_episode_config();
  cfg.steps = 30;
  const auto data = collect_dataset(cfg, 1, default_arm(), PdGains{}, small_env());
  TrainingParams hp;
  hp.epochs = 10;
  TrainingReport rep;
  clone_policy(data, small_arch(), hp, 2, &rep);
  ASSERT_EQ(rep.epoch_loss.size(), 10u);
  EXPECT_LT(rep.epoch_loss.back(), rep.epoch_loss.front());
  EXPECT_NEAR(rep.torque_variance, torque_variance(data), 0.0);
}

TEST(Clone, DivergenceIsReported) {
  EpisodeConfig cfg = default_episode_config();
  cfg.steps = 5;
  const auto data = collect_dataset(cfg, 1, default_arm(), PdGains{}, small_env());
  TrainingParams hp;
  hp.epochs = 5;
  hp.learning_rate = 1e200;
  EXPECT_THROW(clone_policy(data, small_arch(), hp, 1), TrainingError);
}

TEST(Clone, EmptyDatasetIsConfigError) {
  EXPECT_THROW(clone_policy({}, small_arch(), TrainingParams{}, 1), ConfigError);
}

TEST(Arch, JsonRoundTripAndValidation) {
  const ArchSpec a = arch_from_json(arch_to_json(small_arch()));
  ASSERT_EQ(a.conv.size(), 1u);
  EXPECT_EQ(a.conv[0].filters, 4u);
  EXPECT_EQ(a.hidden, (std::vector<size_t>{16}));
  EXPECT_THROW(arch_from_json(nlohmann::json{{"conv", nlohmann::json::array()}}), ConfigError);
  EXPECT_THROW(arch_from_json(nlohmann::json{{"hidden", {0}}}), ConfigError);
}

TEST(Arch, DefaultNetworkFitsDefaultImage) {
  const PolicyNetwork net = init_network(ArchSpec{}, {32, 32, 1}, 2, 1);
  EXPECT_EQ(net.num_outputs(), 2u);
  EXPECT_EQ(net.config_dim, 8u);
  EXPECT_NO_THROW(validate(net));
}
