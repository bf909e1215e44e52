#include <gtest/gtest.h>

#include <set>

#include "dosekit/metrics.hpp"
#include "dosekit/phantom.hpp"
#include "test_util.hpp"

using namespace dosekit;

TEST(Phantom, StructuresAndNormalization) {
  const CaseBundle c = generate_phantom(PhantomSpec{.seed = 17});
  ASSERT_EQ(c.structures.size(), 6u);
  EXPECT_EQ(c.case_id, "case_17");
  EXPECT_EQ(c.ptv().name, "PTV");
  for (const auto& s : c.structures) EXPECT_FALSE(s.empty()) << s.name;
  EXPECT_NEAR(mean_dose(c.dose, c.ptv()), 60.0, 60.0 * 1e-9);
  for (double v : c.dose.values) EXPECT_GE(v, 0.0);
  EXPECT_EQ(c.ct.unit, Unit::HU);
  EXPECT_EQ(c.dose.geometry.dims, (Index3{32, 32, 32}));
}

TEST(Phantom, Deterministic) {
  const CaseBundle a = generate_phantom(PhantomSpec{.seed = 5});
  const CaseBundle b = generate_phantom(PhantomSpec{.seed = 5});
  EXPECT_EQ(a.dose.values, b.dose.values);
  EXPECT_EQ(a.ct.values, b.ct.values);
  for (std::size_t i = 0; i < a.structures.size(); ++i) EXPECT_EQ(a.structures[i].bits, b.structures[i].bits);
  const CaseBundle c = generate_phantom(PhantomSpec{.seed = 6});
  EXPECT_NE(a.ptv().bits, c.ptv().bits);
}

TEST(Phantom, FalloffIsMonotone) {
  const PhantomSpec spec{.seed = 11};
  const CaseBundle c = generate_phantom(spec);
  const auto& g = c.dose.geometry;
  const auto ptv_idx = c.ptv().indices();
  double ptv_min = 1e300;
  for (auto i : ptv_idx) ptv_min = std::min(ptv_min, c.dose.values[i]);
  for (std::size_t v = 0; v < c.dose.size(); ++v) {
    const auto p = g.unravel(v);
    double best = 1e300;
    for (auto i : ptv_idx) {
      const auto q = g.unravel(i);
      double d2 = 0.0;
      for (int a = 0; a < 3; ++a) d2 += std::pow((p[a] - q[a]) * g.spacing[a], 2);
      best = std::min(best, d2);
    }
    if (std::sqrt(best) >= 2.0 * spec.falloff_mm + 8.0) {
      EXPECT_LE(c.dose.values[v], ptv_min);
    }
  }
}

TEST(Phantom, PtvClearOfCordAndCordLimitMostlyMet) {
  int cord_ok = 0;
  for (std::uint64_t seed = 100; seed < 120; ++seed) {
    const CaseBundle c = generate_phantom(PhantomSpec{.seed = seed});
    const auto& cord = *c.find("Cord");
    for (std::size_t i = 0; i < cord.bits.size(); ++i) EXPECT_FALSE(cord.bits[i] && c.ptv().bits[i]);
    cord_ok += max_dose(c.dose, cord) <= 50.0;
  }
  EXPECT_GE(cord_ok, 18);
}

TEST(Phantom, SmallDims) {
  const CaseBundle c = generate_phantom(PhantomSpec{.seed = 1, .dims = {8, 8, 8}, .spacing = {32, 32, 32}});
  EXPECT_FALSE(c.ptv().empty());
}

TEST(Dataset, SplitAndRoundTrip) {
  const auto dir = dosekit::testing::temp_dir("dataset");
  PhantomSpec base;
  base.dims = {16, 16, 16};
  base.spacing = {16, 16, 16};
  const Manifest m = generate_dataset(36, 17, base, dir);
  EXPECT_EQ(m.subset("train").size(), 24u);
  EXPECT_EQ(m.subset("val").size(), 5u);
  EXPECT_EQ(m.subset("test").size(), 7u);

  const Manifest loaded = load_manifest(dir / "manifest.json");
  ASSERT_EQ(loaded.cases.size(), 36u);
  std::set<std::vector<std::size_t>> ptvs;
  for (const auto& e : loaded.cases) {
    const CaseBundle c = load_case(loaded.case_dir(e));
    EXPECT_EQ(c.dose.geometry.dims, base.dims);
    EXPECT_EQ(c.case_id, e.case_id);
    ptvs.insert(c.ptv().indices());
  }
  EXPECT_EQ(ptvs.size(), 36u);
  EXPECT_EQ(loaded.cases.front().seed, 17u);
  EXPECT_EQ(loaded.cases.back().seed, 52u);
  EXPECT_THROW(generate_dataset(10, 1, base, dir, SplitCounts{5, 5, 5}), Error);
}
