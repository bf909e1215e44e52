#include <gtest/gtest.h>

#include "dosekit/mimic.hpp"
#include "dosekit/phantom.hpp"
#include "test_util.hpp"

using namespace dosekit;

namespace {

CaseBundle small_case(std::uint64_t seed = 17) {
  PhantomSpec spec;
  spec.seed = seed;
  spec.dims = {16, 16, 16};
  spec.spacing = {16, 16, 16};
  return generate_phantom(spec);
}

}  // namespace

TEST(Schedule, ConstantThenLinearDecay) {
  EXPECT_EQ(scheduled_lr(1.0, 1, 100), 1.0);
  EXPECT_EQ(scheduled_lr(1.0, 50, 100), 1.0);
  EXPECT_DOUBLE_EQ(scheduled_lr(1.0, 75, 100), 0.5);
  EXPECT_EQ(scheduled_lr(1.0, 100, 100), 0.0);
  EXPECT_EQ(scheduled_lr(2.0, 90, 100, false), 2.0);
  // epoch E of 2N: base for E <= N, base*(2N-E)/N after
  const int n = 20;
  for (int e = 1; e <= 2 * n; ++e)
    EXPECT_DOUBLE_EQ(scheduled_lr(3e-4, e, 2 * n), e <= n ? 3e-4 : 3e-4 * (2 * n - e) / n);
}

TEST(Adam, ZeroGradientLeavesVariables) {
  OptimizerConfig cfg;
  std::vector<double> x{1.0, 2.0, 3.0};
  const auto before = x;
  AdamState s(3);
  std::vector<double> g(3, 0.0);
  for (int i = 0; i < 5; ++i) adam_step(x, std::span<const double>(g), s, 0.1, cfg);
  EXPECT_EQ(x, before);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  OptimizerConfig cfg;
  cfg.eps = 0.0;
  std::vector<double> x{1.0, 1.0};
  AdamState s(2);
  const std::vector<double> g{5.0, -0.01};
  adam_step(x, std::span<const double>(g), s, 0.1, cfg);
  EXPECT_NEAR(x[0], 0.9, 1e-12);
  EXPECT_NEAR(x[1], 1.1, 1e-12);
}

TEST(Adam, ProjectionAndErrors) {
  OptimizerConfig cfg;
  std::vector<double> x{0.01};
  AdamState s(1);
  const std::vector<double> g{1.0};
  adam_step(x, std::span<const double>(g), s, 1.0, cfg);
  EXPECT_EQ(x[0], 0.0);
  cfg.project = false;
  std::vector<double> y{0.01};
  AdamState t(1);
  adam_step(y, std::span<const double>(g), t, 1.0, cfg);
  EXPECT_LT(y[0], 0.0);

  const std::vector<double> bad{std::nan("")};
  EXPECT_THROW(adam_step(y, std::span<const double>(bad), t, 1.0, cfg), Error);
  const std::vector<double> wrong(2, 0.0);
  EXPECT_THROW(adam_step(y, std::span<const double>(wrong), t, 1.0, cfg), Error);
}

TEST(Init, ParseAndDescribe) {
  EXPECT_EQ(parse_init("zeros").kind, InitKind::Zeros);
  EXPECT_EQ(parse_init("uniform:30").value, 30.0);
  EXPECT_EQ(parse_init("rand:9").seed, 9u);
  EXPECT_EQ(parse_init("uniform:30").describe(), "uniform:30.0");
  EXPECT_EQ(parse_init("rand:9").describe(), "rand:9");
  for (const char* bad : {"", "ones", "uniform:", "rand:x"}) EXPECT_THROW(parse_init(bad), Error) << bad;

  GridGeometry g;
  g.dims = {4, 4, 4};
  const Grid3 r = initial_dose(g, InitSpec::random(4));
  EXPECT_EQ(r.values, initial_dose(g, InitSpec::random(4)).values);
  for (double v : r.values) EXPECT_TRUE(v >= 0.0 && v < 70.0);
  EXPECT_THROW(initial_dose(g, InitSpec::uniform(-1.0)), Error);
}

TEST(Mimic, ReferenceIsAStationaryPoint) {
  const CaseBundle c = small_case();
  const LossConfig loss = LossConfig::only({LossTerm::MAE, LossTerm::MOMENT});
  const LossValueGrad at_ref = total_loss_grad(c.dose, c.dose, c.structures, loss);
  EXPECT_NEAR(at_ref.value, 0.0, 1e-12);
  for (double g : at_ref.grad.values) EXPECT_EQ(g, 0.0);

  OptimizerConfig opt;
  opt.iterations = 20;
  const auto r = mimic_dose(c, loss, opt, InitSpec::zeros());
  EXPECT_EQ(r.loss.size(), 20u);
  EXPECT_EQ(r.terms.size(), 20u);
  EXPECT_LT(r.final_loss(), r.initial_loss);
}

TEST(Mimic, MaeDescendsAndIsDeterministic) {
  const CaseBundle c = small_case();
  OptimizerConfig opt;
  opt.lr = 0.5;
  opt.iterations = 400;
  const LossConfig loss = LossConfig::only({LossTerm::MAE});
  const auto a = mimic_dose(c, loss, opt, InitSpec::zeros());
  const auto b = mimic_dose(c, loss, opt, InitSpec::zeros());
  EXPECT_EQ(a.dose.values, b.dose.values);
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_LT(a.final_loss(), 0.01 * a.initial_loss);
  for (double v : a.dose.values) EXPECT_GE(v, 0.0);
  EXPECT_LT(dose_score(a.dose, c.dose), 0.1);
}

TEST(Mimic, ProgressCallbackAndDivergence) {
  const CaseBundle c = small_case();
  OptimizerConfig opt;
  opt.lr = 0.05;
  opt.iterations = 30;
  int calls = 0;
  MimicOptions o;
  o.progress = [&](int it, double) { calls = it; };
  mimic_dose(c, LossConfig::only({LossTerm::MAE}), opt, InitSpec::uniform(10), 0, o);
  EXPECT_EQ(calls, 30);

  MimicOptions strict;
  strict.divergence_factor = 0.0;
  strict.divergence_window = 5;
  try {
    mimic_dose(c, LossConfig::only({LossTerm::MAE}), opt, InitSpec::uniform(10), 0, strict);
    FAIL() << "expected divergence";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Numerical);
  }
}

TEST(Restarts, MaeRestartsConverge) {
  const CaseBundle c = small_case(5);
  OptimizerConfig opt;
  opt.lr = 0.5;
  opt.iterations = 400;
  const auto r = restart_study(c, LossConfig::only({LossTerm::MAE}), opt, {1, 2, 3});
  ASSERT_EQ(r.runs.size(), 3u);
  EXPECT_LT(r.loss_spread_max, 1e-2);
  EXPECT_LT(r.dvh_spread_max, 1e-1);
  const auto again = restart_study(c, LossConfig::only({LossTerm::MAE}), opt, {1, 2, 3});
  EXPECT_EQ(again.final_losses, r.final_losses);
}

TEST(Restarts, MomentOnlyRestartsDescendToDifferentDoses) {
  const CaseBundle c = small_case(5);
  OptimizerConfig opt;
  opt.lr = 0.5;
  opt.iterations = 300;
  LossConfig loss = LossConfig::only({LossTerm::MOMENT});
  loss.w_moment = 1.0;
  const auto r = restart_study(c, loss, opt, {1, 2});
  for (const auto& run : r.runs) EXPECT_LT(run.final_loss(), 0.5 * run.initial_loss);
  EXPECT_NE(r.runs[0].dose.values, r.runs[1].dose.values);
  EXPECT_THROW(restart_study(c, loss, opt, {1}), Error);
}

TEST(Restarts, PairwiseSpread) {
  double mean = 0, max = 0;
  pairwise_spread({1.0, 2.0, 4.0}, mean, max);
  EXPECT_DOUBLE_EQ(mean, (1.0 + 3.0 + 2.0) / 3.0);
  EXPECT_DOUBLE_EQ(max, 3.0);
}

TEST(Probe, ConvexAndNonconvexFunctions) {
  GridGeometry g;
  g.dims = {6, 6, 6};
  const ScalarFn square = [](const Grid3& x) {
    double s = 0.0;
    for (double v : x.values) s += v * v;
    return s;
  };
  const ScalarFn bump = [](const Grid3& x) {
    double s = 0.0;
    for (double v : x.values) s += std::sin(v);
    return s;
  };
  const auto ok = midpoint_convexity_probe(square, g, 200, 1);
  EXPECT_EQ(ok.pairs, 200);
  EXPECT_EQ(ok.violations, 0);
  const auto bad = midpoint_convexity_probe(bump, g, 200, 1);
  EXPECT_GT(bad.violations, 0);
  EXPECT_GT(bad.max_violation, 0.0);

  Grid3 ref(g, Unit::Gy);
  const auto straddle = threshold_straddle_probe(bump, ref, {1.0, 2.0, 3.0});
  EXPECT_EQ(straddle.pairs, 3);
  EXPECT_GT(straddle.violations, 0);
  const auto j = to_json(straddle);
  EXPECT_EQ(j["violations"], straddle.violations);
}

TEST(Cost, IterationCostIsPositive) {
  const CaseBundle c = small_case();
  EXPECT_GT(iteration_cost(c, LossConfig::only({LossTerm::MAE}), 3), 0.0);
}

TEST(MimicJson, ContainsScoresButNoTiming) {
  const CaseBundle c = small_case();
  OptimizerConfig opt;
  opt.iterations = 5;
  const auto r = mimic_dose(c, LossConfig::only({LossTerm::MAE}), opt, InitSpec::zeros());
  const auto j = to_json(r, c.dose, c.structures);
  EXPECT_TRUE(j.contains("dose_score"));
  EXPECT_TRUE(j.contains("dvh_score"));
  EXPECT_EQ(j["loss"].size(), 5u);
  EXPECT_FALSE(j.contains("timing"));
}
