#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fixtures.hpp"

using namespace pxray;

namespace {

AttributionResult result_with(std::map<std::string, double> abs_totals) {
  AttributionResult r;
  r.group_abs_totals = abs_totals;
  r.group_totals = std::move(abs_totals);
  return r;
}

EnvParams small_env() {
  EnvParams env;
  env.image_rows = 12;
  env.image_cols = 12;
  return env;
}

PolicyNetwork small_policy() {
  ArchSpec a;
  a.conv = {{3, 3, 2, Padding::valid}};
  a.hidden = {12};
  return init_network(a, {12, 12, 1}, 2, 5);
}

Scene start_scene() {
  return {default_arm(), ArmState::at_rest({0.3, 1.2}), {0.55, 0.45}};
}

AnalysisOptions options(size_t steps) {
  AnalysisOptions opt;
  opt.steps = steps;
  return opt;
}

}  // namespace

TEST(Ratios, AllOnImage) {
  const GroupMap r = group_ratios(result_with({{"image", 3.0}, {"joint_pos", 0.0}, {"joint_vel", 0.0},
                                               {"ee_pos", 0.0}, {"ee_vel", 0.0}}));
  EXPECT_DOUBLE_EQ(r.at("image"), 1.0);
  for (const char* g : {"joint_pos", "joint_vel", "ee_pos", "ee_vel"}) EXPECT_DOUBLE_EQ(r.at(g), 0.0);
}

TEST(Ratios, EqualTotalsGiveOneFifth) {
  std::map<std::string, double> t;
  for (const auto& g : ratio_groups()) t[g] = 0.7;
  const GroupMap r = group_ratios(result_with(t));
  for (const auto& g : ratio_groups()) EXPECT_NEAR(r.at(g), 0.2, 1e-15);
}

TEST(Ratios, HandDivision) {
  const GroupMap r = group_ratios(result_with({{"image", 1.0}, {"joint_pos", 2.0}, {"joint_vel", 3.0},
                                               {"ee_pos", 4.0}, {"ee_vel", 0.0}}));
  EXPECT_DOUBLE_EQ(r.at("image"), 0.1);
  EXPECT_DOUBLE_EQ(r.at("joint_pos"), 0.2);
  EXPECT_DOUBLE_EQ(r.at("joint_vel"), 0.3);
  EXPECT_DOUBLE_EQ(r.at("ee_pos"), 0.4);
  EXPECT_DOUBLE_EQ(r.at("ee_vel"), 0.0);
}

TEST(Ratios, ZeroRelevanceGivesZeros) {
  const GroupMap r = group_ratios(result_with({{"image", 0.0}}));
  for (const auto& g : ratio_groups()) EXPECT_EQ(r.at(g), 0.0);
}

TEST(Ratios, InvariantUnderAlphaScaling) {
  const PolicyNetwork net = test::two_joint_fixture();
  const auto a = attribute_dtd(net, test::two_joint_image(), test::two_joint_config(), {{0.3, 0.7}});
  const auto b = attribute_dtd(net, test::two_joint_image(), test::two_joint_config(), {{3.0, 7.0}});
  const GroupMap ra = group_ratios(a), rb = group_ratios(b);
  for (const auto& g : ratio_groups()) EXPECT_NEAR(ra.at(g), rb.at(g), 1e-12);
}

TEST(Summary, ConstantSeriesHasZeroStd) {
  RelevanceTimeSeries s;
  for (size_t t = 0; t < 5; ++t) {
    TimeStep ts;
    ts.t = t;
    for (const auto& g : ratio_groups()) ts.ratios[g] = 0.2;
    s.steps.push_back(ts);
  }
  for (const auto& [g, st] : static_summary(s)) {
    EXPECT_NEAR(st.mean, 0.2, 1e-15);
    EXPECT_NEAR(st.std, 0.0, 1e-15);
  }
}

TEST(Summary, TwoPointSeries) {
  RelevanceTimeSeries s;
  for (double v : {0.2, 0.4}) {
    TimeStep ts;
    for (const auto& g : ratio_groups()) ts.ratios[g] = 0.0;
    ts.ratios["image"] = v;
    s.steps.push_back(ts);
  }
  const auto st = static_summary(s).at("image");
  EXPECT_NEAR(st.mean, 0.3, 1e-15);
  EXPECT_NEAR(st.std, 0.1, 1e-15);
}

TEST(Summary, MatchesReferenceOnTenSteps) {
  const std::vector<double> v{0.11, 0.52, 0.33, 0.07, 0.9, 0.41, 0.28, 0.66, 0.15, 0.5};
  RelevanceTimeSeries s;
  for (double x : v) {
    TimeStep ts;
    for (const auto& g : ratio_groups()) ts.ratios[g] = 0.0;
    ts.ratios["joint_vel"] = x;
    s.steps.push_back(ts);
  }
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / 10.0;
  const double sq = std::inner_product(v.begin(), v.end(), v.begin(), 0.0) / 10.0;
  const auto st = static_summary(s).at("joint_vel");
  EXPECT_NEAR(st.mean, mean, 1e-14);
  EXPECT_NEAR(st.std, std::sqrt(sq - mean * mean), 1e-12);
}

TEST(Trajectory, ZeroStepsIsEmpty) {
  const auto out = run_trajectory_analysis(small_policy(), start_scene(), small_env(), options(0));
  ASSERT_EQ(out.series.size(), 3u);
  for (const auto& s : out.series) EXPECT_EQ(s.size(), 0u);
}

TEST(Trajectory, DeterministicAndWellFormed) {
  const PolicyNetwork net = small_policy();
  const auto a = run_trajectory_analysis(net, start_scene(), small_env(), options(6));
  const auto b = run_trajectory_analysis(net, start_scene(), small_env(), options(6));
  EXPECT_EQ(series_to_csv(a.series), series_to_csv(b.series));
  for (const auto& s : a.series) {
    ASSERT_EQ(s.size(), 6u);
    for (const auto& ts : s.steps) {
      double sum = 0.0;
      for (const auto& g : ratio_groups()) {
        EXPECT_GE(ts.ratios.at(g), 0.0);
        EXPECT_LE(ts.ratios.at(g), 1.0);
        sum += ts.ratios.at(g);
      }
      if (ts.total > 0.0) {
        EXPECT_NEAR(sum, 1.0, 1e-9);
      }
    }
  }
  EXPECT_EQ(a.first_step.size(), 3u);
}

TEST(Trajectory, FrozenAlphaDiffersOnlyInWeights) {
  const PolicyNetwork net = small_policy();
  AnalysisOptions opt = options(4);
  opt.methods = {Method::dtd};
  const auto live = run_trajectory_analysis(net, start_scene(), small_env(), opt);
  opt.freeze_alpha = true;
  const auto frozen = run_trajectory_analysis(net, start_scene(), small_env(), opt);
  // Same rollout (alpha does not affect the policy), same first step.
  EXPECT_EQ(live.final_scene.state, frozen.final_scene.state);
  EXPECT_EQ(live.series[0].steps[0].output_total, frozen.series[0].steps[0].output_total);
}

TEST(TargetChange, SameTargetEqualsUnperturbed) {
  const PolicyNetwork net = small_policy();
  const Scene s = start_scene();
  const auto base = run_trajectory_analysis(net, s, small_env(), options(6));
  const auto same = target_change_experiment(net, s, small_env(), options(6), 3,
                                             [](const Scene& sc) { return sc.target; });
  for (size_t k = 0; k < 3; ++k) {
    ASSERT_EQ(same.series[k].size(), base.series[k].size());
    for (size_t t = 0; t < 6; ++t)
      EXPECT_EQ(same.series[k].steps[t].ratios, base.series[k].steps[t].ratios);
  }
  EXPECT_EQ(same.series[0].change_step, std::optional<size_t>(3));
}

TEST(TargetChange, ChangeAfterLastStepEqualsUnperturbed) {
  const PolicyNetwork net = small_policy();
  const auto base = run_trajectory_analysis(net, start_scene(), small_env(), options(5));
  const auto late = target_change_experiment(net, start_scene(), small_env(), options(5), 5,
                                             [](const Scene&) { return Point2{-0.5, -0.4}; });
  for (size_t t = 0; t < 5; ++t) EXPECT_EQ(late.series[1].steps[t].ratios, base.series[1].steps[t].ratios);
  EXPECT_EQ(late.final_scene.target, base.final_scene.target);
}

TEST(TargetChange, NewTargetIsApplied) {
  const PolicyNetwork net = small_policy();
  const auto moved = target_change_experiment(net, start_scene(), small_env(), options(5), 2,
                                              [](const Scene&) { return Point2{-0.5, -0.4}; });
  EXPECT_EQ(moved.final_scene.target, (Point2{-0.5, -0.4}));
}

TEST(TargetChange, RandomBetweenTargetsIsSeededAndReachable) {
  const auto targets = default_episode_config().targets;
  const Scene s = start_scene();
  const Point2 a = random_between_targets(targets, 4)(s);
  const Point2 b = random_between_targets(targets, 4)(s);
  EXPECT_EQ(a, b);
  for (uint64_t seed = 0; seed < 50; ++seed)
    EXPECT_TRUE(target_reachable(s.arm, random_between_targets(targets, seed)(s))) << seed;
}

TEST(Csv, SchemaAndRowCount) {
  const auto out = run_trajectory_analysis(small_policy(), start_scene(), small_env(), options(3));
  const std::string csv = series_to_csv(out.series);
  std::istringstream is(csv);
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, kSeriesCsvHeader);
  size_t rows = 0;
  while (std::getline(is, line)) {
    ++rows;
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 9);
  }
  EXPECT_EQ(rows, 9u);
}

TEST(Csv, ChangeStepComment) {
  RelevanceTimeSeries s;
  s.change_step = 4;
  EXPECT_EQ(series_to_csv({s}).rfind("# change_step=4\n", 0), 0u);
}

TEST(Csv, NineSignificantDigits) {
  EXPECT_EQ(format_g9(1.0 / 3.0), "0.333333333");
  EXPECT_EQ(format_g9(0.25), "0.25");
}

TEST(Pgm, AllZeroRelevance) {
  const Pgm p = scale_to_pgm(std::vector<double>(6, 0.0), 2, 3);
  for (int v : p.pixels) EXPECT_EQ(v, 0);
}

TEST(Pgm, SingleNonzeroPixel) {
  std::vector<double> v(12, 0.0);
  v[7] = 0.3;
  const Pgm p = scale_to_pgm(v, 3, 4);
  for (size_t k = 0; k < 12; ++k) EXPECT_EQ(p.pixels[k], k == 7 ? 255 : 0);
}

TEST(Pgm, RoundTripPreservesArgmax) {
  const PolicyNetwork net = test::two_joint_fixture();
  const auto r = attribute_dtd(net, test::two_joint_image(), test::two_joint_config(), {{0.5, 0.5}});
  const auto path = (test::scratch_dir("pgm") / "h.pgm").string();
  emit_heatmap(r, net, HeatmapKind::image, path);
  const Pgm p = parse_pgm(read_text_file(path));
  ASSERT_EQ(p.width, 3u);
  ASSERT_EQ(p.height, 3u);
  const auto map = image_relevance_map(r);
  const auto want = std::max_element(map.begin(), map.end()) - map.begin();
  const auto got = std::max_element(p.pixels.begin(), p.pixels.end()) - p.pixels.begin();
  EXPECT_EQ(got, want);
  EXPECT_EQ(p.pixels[got], 255);
}

TEST(Pgm, ConfigHeatmapWritesRowAndCsv) {
  const PolicyNetwork net = test::two_joint_fixture();
  const auto r = attribute_gbp(net, test::two_joint_image(), test::two_joint_config(), {{0.5, 0.5}});
  const auto dir = test::scratch_dir("config_heatmap");
  emit_heatmap(r, net, HeatmapKind::config, (dir / "c.pgm").string());
  const Pgm p = parse_pgm(read_text_file((dir / "c.pgm").string()));
  EXPECT_EQ(p.height, 1u);
  EXPECT_EQ(p.width, 8u);
  const std::string csv = read_text_file((dir / "c.csv").string());
  EXPECT_EQ(csv.rfind("feature_name,relevance\njoint_pos_0,", 0), 0u);
  EXPECT_NE(csv.find("ee_vel_1,"), std::string::npos);
}

TEST(Pgm, RejectsOtherFormats) {
  EXPECT_THROW(parse_pgm("P5\n1 1\n255\n"), ParseError);
  EXPECT_THROW(parse_pgm("P2\n2 2\n255\n1 2 3\n"), ParseError);
}

TEST(Diagnostics, ReportWithoutFailing) {
  const auto out = target_change_experiment(small_policy(), start_scene(), small_env(), options(8), 4,
                                            [](const Scene&) { return Point2{-0.5, -0.4}; });
  const Diagnostic a = initial_image_diagnostic(out.series[0]);
  const Diagnostic b = target_change_diagnostic(out.series[0]);
  EXPECT_FALSE(a.detail.empty());
  EXPECT_NE(b.detail.find("change_step=4"), std::string::npos);
}
