#include <gtest/gtest.h>

#include <cmath>

#include "dosekit/losses.hpp"
#include "dosekit/metrics.hpp"
#include "dosekit/phantom.hpp"
#include "test_util.hpp"

using namespace dosekit;
using dosekit::testing::full_mask;
using dosekit::testing::line_grid;

namespace {

double naive_sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Direct power mean in long double.
double naive_power_mean(const std::vector<double>& d, int p) {
  long double s = 0.0L;
  for (double v : d) s += std::pow(static_cast<long double>(v), p);
  return static_cast<double>(std::pow(s / d.size(), 1.0L / p));
}

std::vector<double> masked(const Grid3& g, const StructureMask& m) {
  std::vector<double> out;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (m.bits[i]) out.push_back(g.values[i]);
  return out;
}

struct RandomInstance {
  Grid3 pred, ref;
  std::vector<StructureMask> structures;
};

RandomInstance random_instance(std::uint64_t seed, int n = 16) {
  Rng rng(seed);
  GridGeometry g;
  g.dims = {n, n, n};
  RandomInstance r{dosekit::testing::random_grid(g, rng, 5.0, 70.0), dosekit::testing::random_grid(g, rng, 5.0, 70.0), {}};
  r.structures.push_back(dosekit::testing::random_mask(g, rng, 0.05, "PTV", Role::PTV));
  r.structures.push_back(dosekit::testing::random_mask(g, rng, 0.03, "Cord"));
  r.structures.push_back(dosekit::testing::random_mask(g, rng, 0.04, "Heart"));
  return r;
}

}  // namespace

// ---------------------------------------------------------------- MAE

TEST(MaeLoss, Examples) {
  const Grid3 ref = line_grid({2.0, 5.0});
  auto r = mae_loss_grad(line_grid({1.0, 3.0}), ref);
  EXPECT_DOUBLE_EQ(r.value, 1.5);
  EXPECT_DOUBLE_EQ(r.grad.values[0], -0.5);
  EXPECT_DOUBLE_EQ(r.grad.values[1], -0.5);

  r = mae_loss_grad(ref, ref);
  EXPECT_EQ(r.value, 0.0);
  for (double g : r.grad.values) EXPECT_EQ(g, 0.0);

  r = mae_loss_grad(line_grid({3.0, 6.0, 1.0, 11.0}), line_grid({2.0, 5.0, 0.0, 10.0}));
  EXPECT_DOUBLE_EQ(r.value, 1.0);
  for (double g : r.grad.values) EXPECT_DOUBLE_EQ(g, 0.25);
}

TEST(MaeLoss, GeometryMismatch) {
  EXPECT_THROW(mae_loss_grad(line_grid({1.0}), line_grid({1.0, 2.0})), Error);
}

// ---------------------------------------------------------------- sigmoid DVH

TEST(SigmoidVolumeAtDose, Examples) {
  const Grid3 d = line_grid({10.0, 20.0, 30.0});
  const StructureMask m = full_mask(d.geometry);
  const double expected = (naive_sigmoid(10.0) + 0.5 + naive_sigmoid(-10.0)) / 3.0;
  const auto r = sigmoid_volume_at_dose(d, m, 20.0, 1.0);
  EXPECT_NEAR(r.value, expected, 1e-12);
  EXPECT_NEAR(r.value, 0.5, 1e-4);

  const auto at = sigmoid_volume_at_dose(line_grid({20.0}), full_mask(line_grid({20.0}).geometry), 20.0, 1.0);
  EXPECT_DOUBLE_EQ(at.value, 0.5);
  EXPECT_DOUBLE_EQ(at.grad.values[0], 0.25);

  const Grid3 hot = line_grid({40.0, 55.0, 90.0});
  EXPECT_GE(sigmoid_volume_at_dose(hot, full_mask(hot.geometry), 20.0, 1.0).value, 1.0 - naive_sigmoid(-20.0));
}

TEST(SigmoidVolumeAtDose, GradientOnlyInsideMask) {
  const Grid3 d = line_grid({10.0, 20.0, 30.0});
  StructureMask m(d.geometry, "m", Role::OAR);
  m.bits = {0, 1, 0};
  const auto r = sigmoid_volume_at_dose(d, m, 21.0, 2.0);
  const double s = naive_sigmoid(-0.5);
  EXPECT_DOUBLE_EQ(r.value, s);
  EXPECT_EQ(r.grad.values[0], 0.0);
  EXPECT_NEAR(r.grad.values[1], s * (1 - s) / 2.0, 1e-15);
  EXPECT_EQ(r.grad.values[2], 0.0);
  m.bits = {0, 0, 0};
  try {
    sigmoid_volume_at_dose(d, m, 1.0, 1.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::EmptyMask);
  }
}

TEST(DvhVectorApprox, BoundsAndMonotone) {
  DvhLossSpec spec;
  spec.thresholds = {1.0, 2.0, 3.0};
  const Grid3 u = line_grid({50.0, 50.0});
  for (double v : dvh_vector_approx(u, full_mask(u.geometry), spec)) EXPECT_NEAR(v, 1.0, 1e-15);

  spec.thresholds = {10.0, 20.0, 60.0};
  const Grid3 z = line_grid({0.0, 0.0, 0.0});
  for (double v : dvh_vector_approx(z, full_mask(z.geometry), spec)) EXPECT_LE(v, naive_sigmoid(-10.0) + 1e-18);

  Rng rng(5);
  DvhLossSpec def;
  for (int t = 0; t < 10; ++t) {
    GridGeometry g;
    g.dims = {50, 1, 1};
    const Grid3 d = dosekit::testing::random_grid(g, rng, 0, 75);
    const auto v = dvh_vector_approx(d, full_mask(g), def);
    for (std::size_t i = 1; i < v.size(); ++i) EXPECT_LE(v[i], v[i - 1]);
  }
}

TEST(DvhVectorApprox, ConvergesToExactDvhAsBetaShrinks) {
  // Doses at least 10 beta_max from every threshold: thresholds at 100k, doses at 100k +/- 50.
  Rng rng(31);
  DvhLossSpec spec;
  spec.thresholds = {100.0, 200.0, 300.0, 400.0};
  GridGeometry g;
  g.dims = {40, 1, 1};
  for (int c = 0; c < 10; ++c) {
    Grid3 d(g, Unit::Gy);
    for (double& v : d.values) v = 100.0 * static_cast<double>(rng.below(5)) + (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(20.0, 50.0);
    const StructureMask m = full_mask(g);
    double prev = 1.0;
    for (double beta : {2.0, 1.0, 0.5, 0.25}) {
      spec.beta = beta;
      const auto approx = dvh_vector_approx(d, m, spec);
      double err = 0.0;
      for (std::size_t t = 0; t < approx.size(); ++t)
        err = std::max(err, std::abs(approx[t] - volume_fraction_at(d, m, spec.thresholds[t])));
      EXPECT_LE(err, 4.6e-5);
      EXPECT_LE(err, prev);
      prev = err;
    }
  }
}

TEST(DvhLoss, Examples) {
  const Grid3 pred = line_grid({0.0, 0.0});
  const Grid3 ref = line_grid({60.0, 60.0});
  DvhLossSpec spec;
  spec.thresholds = {30.0};
  spec.beta = 1.0;
  const std::vector<StructureMask> s{full_mask(pred.geometry)};
  const double expected = std::pow(naive_sigmoid(30.0) - naive_sigmoid(-30.0), 2);
  const auto r = dvh_loss_grad(pred, ref, s, spec);
  EXPECT_NEAR(r.value, expected, 1e-12);
  EXPECT_NEAR(r.value, 1.0, 1e-12);
  EXPECT_EQ(dvh_loss_grad(ref, ref, s, spec).value, 0.0);
  EXPECT_THROW(dvh_loss_grad(pred, ref, {}, spec), Error);
}

TEST(DvhLoss, MatchesDirectDefinition) {
  const auto inst = random_instance(77, 8);
  DvhLossSpec spec;
  spec.thresholds = DvhLossSpec::uniform_thresholds(12, 0.0, 70.0);
  spec.beta = 2.0;
  double expected = 0.0;
  for (const auto& s : inst.structures) {
    const auto vp = dvh_vector_approx(inst.pred, s, spec);
    const auto vr = dvh_vector_approx(inst.ref, s, spec);
    for (std::size_t t = 0; t < vp.size(); ++t) expected += (vp[t] - vr[t]) * (vp[t] - vr[t]);
  }
  expected /= static_cast<double>(inst.structures.size() * spec.thresholds.size());
  const auto r = dvh_loss_grad(inst.pred, inst.ref, inst.structures, spec);
  EXPECT_NEAR(r.value, expected, 1e-14);
  EXPECT_GE(r.value, 0.0);
}

// ---------------------------------------------------------------- moments

TEST(Moment, Examples) {
  const Grid3 d = line_grid({1.0, 2.0, 3.0});
  const StructureMask m = full_mask(d.geometry);
  EXPECT_NEAR(moment(d, m, 1).value, 2.0, 1e-15);
  EXPECT_NEAR(moment(d, m, 2).value, std::sqrt(14.0 / 3.0), 1e-14);
  EXPECT_NEAR(moment(d, m, 2).value, 2.1602, 1e-4);
  const Grid3 u = line_grid({42.0, 42.0, 42.0, 42.0});
  for (int p : {1, 2, 10, 50}) EXPECT_NEAR(moment(u, full_mask(u.geometry), p).value, 42.0, 1e-12);
}

TEST(Moment, MatchesNaivePowerMeanAndGradient) {
  Rng rng(12);
  GridGeometry g;
  g.dims = {30, 1, 1};
  for (int t = 0; t < 20; ++t) {
    const Grid3 d = dosekit::testing::random_grid(g, rng, 0.0, 70.0);
    const StructureMask m = dosekit::testing::random_mask(g, rng, 0.6);
    const auto doses = masked(d, m);
    for (int p : {1, 2, 3, 10}) {
      const auto r = moment(d, m, p);
      const double naive = naive_power_mean(doses, p);
      EXPECT_NEAR(r.value, naive, 1e-12 * naive);
      // dM/dd_j = (1/n) d_j^(p-1) M^(1-p)
      for (std::size_t i = 0; i < d.size(); ++i) {
        const double expected =
            m.bits[i] ? std::pow(d.values[i], p - 1) * std::pow(naive, 1 - p) / static_cast<double>(doses.size()) : 0.0;
        EXPECT_NEAR(r.grad.values[i], expected, 1e-12 * std::max(1.0, std::abs(expected)));
      }
    }
  }
}

TEST(Moment, HighOrderDoesNotOverflow) {
  const Grid3 d = line_grid({1e30, 2e30, 5e29});
  const auto r = moment(d, full_mask(d.geometry), 50);
  EXPECT_TRUE(std::isfinite(r.value));
  EXPECT_LE(r.value, 2e30);
  EXPECT_GE(r.value, 2e30 * std::pow(3.0, -1.0 / 50));
}

TEST(Moment, ZeroDoseHasZeroGradient) {
  const Grid3 d = line_grid({0.0, 0.0, 0.0});
  for (int p : {1, 2, 10}) {
    const auto r = moment(d, full_mask(d.geometry), p);
    EXPECT_EQ(r.value, 0.0);
    for (double g : r.grad.values) EXPECT_EQ(g, 0.0);
  }
}

TEST(Moment, Errors) {
  const Grid3 d = line_grid({1.0, -2.0});
  try {
    moment(d, full_mask(d.geometry), 2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NegativeDose);
  }
  EXPECT_NEAR(moment(d, full_mask(d.geometry), 1, NegativeDosePolicy::Clamp).value, 0.5, 1e-15);
  StructureMask empty(d.geometry, "e", Role::OAR);
  EXPECT_THROW(moment(d, empty, 1), Error);
  EXPECT_THROW(moment(line_grid({1.0}), full_mask(line_grid({1.0}).geometry), 0), Error);
}

TEST(MomentProperties, AlgebraOnRandomDoses) {
  Rng rng(2024);
  GridGeometry g;
  g.dims = {12, 12, 12};
  for (int t = 0; t < 100; ++t) {
    const Grid3 d = dosekit::testing::random_grid(g, rng, 0.0, 70.0);
    const StructureMask m = dosekit::testing::random_mask(g, rng, rng.uniform(0.01, 0.5));
    const auto doses = masked(d, m);
    const double mx = *std::max_element(doses.begin(), doses.end());
    double mean = 0.0;
    for (double v : doses) mean += v;
    mean /= static_cast<double>(doses.size());
    EXPECT_NEAR(moment(d, m, 1).value, mean, 1e-12 * mean);

    double prev = 0.0;
    for (int p : {1, 2, 5, 10, 50}) {
      const double mp = moment(d, m, p).value;
      EXPECT_GE(mp, prev * (1 - 1e-12));
      EXPECT_LE(mp, mx);
      EXPECT_GE(mp, mx * std::pow(static_cast<double>(doses.size()), -1.0 / p) * (1 - 1e-12));
      prev = mp;

      const double c = rng.uniform(0.1, 10.0);
      Grid3 scaled = d;
      for (double& v : scaled.values) v *= c;
      EXPECT_NEAR(moment(scaled, m, p).value, c * mp, 1e-12 * c * mp);
    }
  }
}

TEST(MomentProperties, MidpointConvexity) {
  Rng rng(99);
  GridGeometry g;
  g.dims = {10, 10, 10};
  const StructureMask m = dosekit::testing::random_mask(g, rng, 0.3);
  for (int t = 0; t < 200; ++t) {
    const Grid3 x = dosekit::testing::random_grid(g, rng, 0, 70);
    const Grid3 y = dosekit::testing::random_grid(g, rng, 0, 70);
    Grid3 mid = x;
    for (std::size_t i = 0; i < mid.size(); ++i) mid.values[i] = 0.5 * (x.values[i] + y.values[i]);
    for (int p : {1, 2, 10}) {
      EXPECT_LE(moment(mid, m, p).value, 0.5 * (moment(x, m, p).value + moment(y, m, p).value) + 1e-9);
    }
  }
}

TEST(MomentLoss, Examples) {
  const Grid3 pred = line_grid({50.0});
  const Grid3 ref = line_grid({60.0});
  MomentSpec spec;
  spec.default_orders = {1};
  const auto r = moment_loss_grad(pred, ref, {full_mask(pred.geometry)}, spec);
  EXPECT_NEAR(r.value, 100.0, 1e-12);
  EXPECT_NEAR(r.grad.values[0], -20.0, 1e-12);

  const auto inst = random_instance(5, 8);
  const auto z = moment_loss_grad(inst.ref, inst.ref, inst.structures, MomentSpec{});
  EXPECT_EQ(z.value, 0.0);
  for (double gv : z.grad.values) EXPECT_EQ(gv, 0.0);
}

TEST(MomentLoss, DisjointStructuresAddUp) {
  GridGeometry g;
  g.dims = {6, 1, 1};
  Grid3 pred(g, Unit::Gy), ref(g, Unit::Gy);
  pred.values = {10, 20, 30, 40, 50, 60};
  ref.values = {12, 18, 35, 41, 44, 66};
  StructureMask a(g, "A", Role::OAR), b(g, "B", Role::OAR);
  a.bits = {1, 1, 1, 0, 0, 0};
  b.bits = {0, 0, 0, 1, 1, 1};
  const MomentSpec spec;
  const auto both = moment_loss_grad(pred, ref, {a, b}, spec);
  const auto la = moment_loss_grad(pred, ref, {a}, spec);
  const auto lb = moment_loss_grad(pred, ref, {b}, spec);
  EXPECT_NEAR(both.value, la.value + lb.value, 1e-12 * both.value);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(both.grad.values[i], la.grad.values[i] + lb.grad.values[i]);
}

TEST(MomentLoss, PermutedDosesShareMomentsButNotVoxels) {
  // Zero moment loss does not imply identical doses.
  const Grid3 pred = line_grid({10.0, 30.0, 50.0});
  const Grid3 ref = line_grid({50.0, 10.0, 30.0});
  const std::vector<StructureMask> s{full_mask(pred.geometry)};
  EXPECT_NEAR(moment_loss_grad(pred, ref, s, MomentSpec{}).value, 0.0, 1e-20);
  EXPECT_GT(mae_loss_grad(pred, ref).value, 0.0);
}

TEST(MomentLoss, MissingStructureInSpec) {
  const Grid3 d = line_grid({1.0, 2.0});
  MomentSpec spec;
  spec.overrides["Cord"] = {5, 10};
  const std::vector<StructureMask> s{full_mask(d.geometry, "Heart")};
  try {
    moment_loss_grad(d, d, s, spec);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Config);
  }
  spec.skip_missing = true;
  EXPECT_EQ(moment_loss_grad(d, d, s, spec).value, 0.0);
}

TEST(MomentSpec, OrdersMustIncrease) {
  MomentSpec spec;
  spec.default_orders = {1, 1};
  EXPECT_THROW(spec.validate(), Error);
  spec.default_orders = {0, 2};
  EXPECT_THROW(spec.validate(), Error);
}

// ---------------------------------------------------------------- total

TEST(TotalLoss, TermCombination) {
  const auto inst = random_instance(8, 8);
  const auto mae = mae_loss_grad(inst.pred, inst.ref);
  const auto mom = moment_loss_grad(inst.pred, inst.ref, inst.structures, MomentSpec{});

  const auto only = total_loss_grad(inst.pred, inst.ref, inst.structures, LossConfig::only({LossTerm::MAE}));
  EXPECT_EQ(only.value, mae.value);
  EXPECT_EQ(only.grad.values, mae.grad.values);

  LossConfig zero = LossConfig::only({LossTerm::MAE, LossTerm::MOMENT});
  zero.w_moment = 0.0;
  const auto z = total_loss_grad(inst.pred, inst.ref, inst.structures, zero);
  EXPECT_EQ(z.value, mae.value);
  EXPECT_EQ(z.grad.values, mae.grad.values);

  LossConfig paper = LossConfig::only({LossTerm::MAE, LossTerm::MOMENT});
  EXPECT_DOUBLE_EQ(paper.w_moment, 0.01);
  const auto t = total_loss_grad(inst.pred, inst.ref, inst.structures, paper);
  EXPECT_NEAR(t.value, mae.value + 0.01 * mom.value, 1e-12 * t.value);
  EXPECT_EQ(t.terms.at("MAE"), mae.value);
  EXPECT_EQ(t.terms.at("MOMENT"), mom.value);
  for (std::size_t i = 0; i < t.grad.size(); ++i)
    EXPECT_DOUBLE_EQ(t.grad.values[i], mae.grad.values[i] + 0.01 * mom.grad.values[i]);

  LossConfig dvh = LossConfig::only({LossTerm::MAE, LossTerm::DVH});
  EXPECT_DOUBLE_EQ(dvh.w_dvh, 10.0);
  const auto d = total_loss_grad(inst.pred, inst.ref, inst.structures, dvh);
  EXPECT_NEAR(d.value, d.terms.at("MAE") + 10.0 * d.terms.at("DVH"), 1e-12 * d.value);

  EXPECT_THROW(total_loss_grad(inst.pred, inst.ref, inst.structures, LossConfig::only({})), Error);
}

TEST(LossConfigJson, RoundTrip) {
  LossConfig cfg = LossConfig::only({LossTerm::MAE, LossTerm::DVH, LossTerm::MOMENT});
  cfg.w_dvh = 3.5;
  cfg.moments.overrides["Cord"] = {5, 10};
  cfg.moments.overrides["Heart"] = {1, 2};
  cfg.dvh.beta = 0.5;
  const LossConfig back = loss_config_from_json(nlohmann::json::parse(to_json(cfg).dump()));
  EXPECT_EQ(back.enabled, cfg.enabled);
  EXPECT_EQ(back.w_dvh, 3.5);
  EXPECT_EQ(back.dvh.thresholds, cfg.dvh.thresholds);
  EXPECT_EQ(back.moments.overrides, cfg.moments.overrides);

  const auto grid = loss_config_from_json(nlohmann::json::parse(R"({"terms":["DVH"],"dvh":{"count":60,"min":0,"max":75}})"));
  EXPECT_EQ(grid.dvh.thresholds.size(), 60u);
  EXPECT_DOUBLE_EQ(grid.dvh.thresholds.back(), 75.0 - 75.0 / 120.0);
  EXPECT_THROW(loss_config_from_json(nlohmann::json::parse(R"({"terms":["L2"]})")), Error);
}

// ---------------------------------------------------------------- gradient checks

TEST(Gradcheck, MaeAwayFromTies) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto inst = random_instance(seed);
    for (std::size_t i = 0; i < inst.pred.size(); ++i)
      if (std::abs(inst.pred.values[i] - inst.ref.values[i]) < 1e-2) inst.pred.values[i] += 0.5;
    const auto r = finite_difference_gradcheck([&](const Grid3& p) { return mae_loss_grad(p, inst.ref); }, inst.pred,
                                               1e-4, 50, seed);
    EXPECT_LT(r.max_rel_err, 1e-6);
  }
}

TEST(Gradcheck, MomentAndDvhLosses) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto inst = random_instance(100 + seed);
    std::vector<std::size_t> cand;
    for (const auto& s : inst.structures)
      for (auto i : s.indices()) cand.push_back(i);
    const auto mom = finite_difference_gradcheck(
        [&](const Grid3& p) { return moment_loss_grad(p, inst.ref, inst.structures, MomentSpec{}); }, inst.pred, 1e-4,
        40, seed, cand);
    EXPECT_LT(mom.max_rel_err, 1e-4);
    const auto dvh = finite_difference_gradcheck(
        [&](const Grid3& p) { return dvh_loss_grad(p, inst.ref, inst.structures, DvhLossSpec{}); }, inst.pred, 1e-4,
        40, seed, cand);
    EXPECT_LT(dvh.max_rel_err, 1e-4);
  }
}

TEST(Gradcheck, DetectsWrongGradient) {
  const auto inst = random_instance(3, 6);
  auto broken = [&](const Grid3& p) {
    auto r = mae_loss_grad(p, inst.ref);
    for (double& g : r.grad.values) g *= 1.5;
    return r;
  };
  EXPECT_GT(finite_difference_gradcheck(broken, inst.pred, 1e-4, 10, 1).max_rel_err, 0.2);
}
