#include <gtest/gtest.h>

#include "dosekit/phantom.hpp"
#include "dosekit/preprocess.hpp"
#include "test_util.hpp"

using namespace dosekit;
using dosekit::testing::line_grid;

TEST(ClipRescaleCt, ClipRangeEndpointsAndMidpoint) {
  const Grid3 ct = line_grid({-1024.0, 3071.0, 1023.5, -3000.0, 5000.0}, Unit::HU);
  const Grid3 out = clip_rescale_ct(ct);
  EXPECT_EQ(out.unit, Unit::Unitless);
  EXPECT_DOUBLE_EQ(out.values[0], 0.0);
  EXPECT_DOUBLE_EQ(out.values[1], 1.0);
  EXPECT_DOUBLE_EQ(out.values[2], 0.5);
  EXPECT_DOUBLE_EQ(out.values[3], 0.0);
  EXPECT_DOUBLE_EQ(out.values[4], 1.0);
}

TEST(ClipRescaleCt, MonotoneIntoUnitInterval) {
  Rng rng(4);
  GridGeometry g;
  g.dims = {200, 1, 1};
  Grid3 ct = dosekit::testing::random_grid(g, rng, -4000, 6000, Unit::HU);
  std::sort(ct.values.begin(), ct.values.end());
  const Grid3 out = clip_rescale_ct(ct);
  for (std::size_t i = 0; i < out.size(); ++i) {
    EXPECT_GE(out.values[i], 0.0);
    EXPECT_LE(out.values[i], 1.0);
    if (i > 0) {
      EXPECT_GE(out.values[i], out.values[i - 1]);
    }
  }
}

TEST(ClipRescaleCt, RejectsNonHu) {
  try {
    clip_rescale_ct(line_grid({1.0}, Unit::Gy));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Unit);
  }
}

TEST(OneHot, ChannelsMatchMasks) {
  const CaseBundle c = generate_phantom(PhantomSpec{.seed = 3, .dims = {16, 16, 16}});
  const ChannelStack stack = one_hot_structures(c.structures);
  ASSERT_EQ(stack.channels.size(), 6u);
  EXPECT_EQ(stack.names.back(), "PTV");
  for (std::size_t ch = 0; ch < stack.channels.size(); ++ch) {
    const StructureMask* m = c.find(stack.names[ch]);
    ASSERT_NE(m, nullptr);
    const auto sum = std::count(stack.channels[ch].begin(), stack.channels[ch].end(), std::uint8_t{1});
    EXPECT_EQ(static_cast<std::size_t>(sum), m->count()) << stack.names[ch];
  }
}

TEST(OneHot, MissingStructureGivesZeroChannel) {
  CaseBundle c = generate_phantom(PhantomSpec{.seed = 3, .dims = {16, 16, 16}});
  std::erase_if(c.structures, [](const StructureMask& s) { return s.name == "Heart"; });
  const ChannelStack stack = one_hot_structures(c.structures);
  const auto heart = std::find(stack.names.begin(), stack.names.end(), "Heart") - stack.names.begin();
  for (auto b : stack.channels[static_cast<std::size_t>(heart)]) EXPECT_EQ(b, 0);
}

TEST(OneHot, OverlapSetsBothChannels) {
  GridGeometry g;
  g.dims = {3, 1, 1};
  StructureMask cord(g, "Cord", Role::OAR), eso(g, "Esophagus", Role::OAR), ptv(g, "PTV", Role::PTV);
  cord.bits = {1, 1, 0};
  eso.bits = {0, 1, 1};
  ptv.bits = {0, 0, 1};
  const ChannelStack stack = one_hot_structures({cord, eso, ptv});
  EXPECT_EQ(stack.channels[0], (std::vector<std::uint8_t>{0, 1, 1}));  // Esophagus
  EXPECT_EQ(stack.channels[1], (std::vector<std::uint8_t>{1, 1, 0}));  // Cord
  EXPECT_EQ(stack.channels[0][1] + stack.channels[1][1], 2);
}

TEST(OneHot, DuplicateNamesAreConfigError) {
  GridGeometry g;
  StructureMask a(g, "Cord", Role::OAR), b(g, "Cord", Role::OAR);
  try {
    one_hot_structures({a, b});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Config);
  }
}

namespace {

struct NormCase {
  Grid3 dose;
  StructureMask ptv;
};

NormCase two_voxel_case(double ptv_dose, double oar_dose) {
  NormCase c{line_grid({ptv_dose, oar_dose}), {}};
  c.ptv = StructureMask(c.dose.geometry, "PTV", Role::PTV);
  c.ptv.bits = {1, 0};
  return c;
}

}  // namespace

TEST(NormalizePtvMean, Examples) {
  {
    auto c = two_voxel_case(30.0, 12.0);
    const auto r = normalize_ptv_mean(c.dose, c.ptv, 60.0);
    EXPECT_DOUBLE_EQ(r.scale, 2.0);
    EXPECT_DOUBLE_EQ(r.dose.values[0], 60.0);
    EXPECT_DOUBLE_EQ(r.dose.values[1], 24.0);
  }
  {
    auto c = two_voxel_case(60.0, 12.0);
    const auto r = normalize_ptv_mean(c.dose, c.ptv, 60.0);
    EXPECT_DOUBLE_EQ(r.scale, 1.0);
    EXPECT_EQ(r.dose.values, c.dose.values);
  }
  {
    auto c = two_voxel_case(45.0, 30.0);
    const auto r = normalize_ptv_mean(c.dose, c.ptv, 60.0);
    EXPECT_NEAR(r.scale, 4.0 / 3.0, 1e-15);
    EXPECT_NEAR(r.dose.values[1], 40.0, 1e-12);
  }
}

TEST(NormalizePtvMean, IdempotentAndExact) {
  Rng rng(17);
  GridGeometry g;
  g.dims = {8, 8, 8};
  for (int t = 0; t < 20; ++t) {
    const Grid3 dose = dosekit::testing::random_grid(g, rng, 0.1, 80.0);
    const StructureMask ptv = dosekit::testing::random_mask(g, rng, 0.2, "PTV", Role::PTV);
    const auto once = normalize_ptv_mean(dose, ptv, 60.0);
    EXPECT_NEAR(masked_mean(once.dose, ptv), 60.0, 60.0 * 1e-9);
    const auto twice = normalize_ptv_mean(once.dose, ptv, 60.0);
    for (std::size_t i = 0; i < dose.size(); ++i)
      EXPECT_NEAR(twice.dose.values[i], once.dose.values[i], 1e-12 * std::abs(once.dose.values[i]));
  }
}

TEST(NormalizePtvMean, Errors) {
  auto c = two_voxel_case(0.0, 10.0);
  EXPECT_THROW(normalize_ptv_mean(c.dose, c.ptv, 60.0), Error);
  c.ptv.bits = {0, 0};
  try {
    normalize_ptv_mean(c.dose, c.ptv, 60.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Normalization);
  }
}

namespace {

// CT-grid case with a cubic PTV at `lower` (size 4) and a coarser dose grid.
CaseBundle boxed_case(Index3 dims, Index3 lower) {
  GridGeometry g;
  g.dims = dims;
  g.spacing = {2.0, 2.0, 2.0};
  CaseBundle c;
  c.case_id = "boxed";
  c.ct = Grid3(g, Unit::HU, 40.0);
  StructureMask ptv(g, "PTV", Role::PTV), cord(g, "Cord", Role::OAR);
  for (int k = 0; k < 4; ++k)
    for (int j = 0; j < 4; ++j)
      for (int i = 0; i < 4; ++i) ptv.bits[g.index(lower[0] + i, lower[1] + j, lower[2] + k)] = 1;
  cord.bits[g.index(lower[0], lower[1], std::min(dims[2] - 1, lower[2] + 5))] = 1;
  c.structures = {ptv, cord};
  GridGeometry dg = same_extent(g, {dims[0] / 2, dims[1] / 2, dims[2] / 2});
  c.dose = Grid3(dg, Unit::Gy, 30.0);
  return c;
}

}  // namespace

TEST(PrepareCase, CenteredMasksStayInside) {
  const CaseBundle raw = boxed_case({24, 24, 24}, {10, 10, 8});
  PreprocessConfig cfg;
  cfg.crop_size = {12, 12, 12};
  cfg.net_dims = {8, 8, 8};
  const CaseBundle out = prepare_case(raw, cfg);
  EXPECT_EQ(out.ct.geometry.dims, (Index3{8, 8, 8}));
  EXPECT_EQ(out.dose.geometry, out.ct.geometry);
  for (const auto& s : out.structures) EXPECT_EQ(s.geometry, out.ct.geometry);
  // the union bounding box of the input masks lies inside the output extent
  const Vec3 ext = out.ct.geometry.extent();
  for (const auto& s : raw.structures) {
    const IndexBox b = bounding_box(s);
    for (int a = 0; a < 3; ++a) {
      EXPECT_LE(out.ct.geometry.origin[a], b.lower[a] * 2.0);
      EXPECT_GE(out.ct.geometry.origin[a] + ext[a], b.upper[a] * 2.0);
    }
  }
  EXPECT_FALSE(out.ptv().empty());
  EXPECT_NEAR(masked_mean(out.dose, out.ptv()), 60.0, 60.0 * 1e-9);
}

TEST(PrepareCase, EdgeTouchingPtvShiftsWindowInward) {
  const CaseBundle raw = boxed_case({24, 24, 24}, {0, 20, 0});
  PreprocessConfig cfg;
  cfg.crop_size = {10, 10, 10};
  cfg.net_dims = {10, 10, 10};
  const CaseBundle out = prepare_case(raw, cfg);
  // window starts at the volume border on x and z, and ends at it on y
  EXPECT_DOUBLE_EQ(out.ct.geometry.origin[0], 0.0);
  EXPECT_DOUBLE_EQ(out.ct.geometry.origin[1], 14.0 * 2.0);
  EXPECT_DOUBLE_EQ(out.ct.geometry.origin[2], 0.0);
  EXPECT_EQ(out.ptv().count(), raw.ptv().count());
  EXPECT_EQ(out.find("Cord")->count(), 1u);
}

TEST(PrepareCase, OutputGeometryAndMaskSupport) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const CaseBundle raw = generate_phantom(PhantomSpec{.seed = seed, .dims = {24, 24, 24}});
    PreprocessConfig cfg;
    cfg.net_dims = {16, 16, 16};
    const CaseBundle out = prepare_case(raw, cfg);
    EXPECT_EQ(out.ct.geometry.dims, cfg.net_dims);
    // no mask voxel lands further than one source voxel from the original support
    for (const auto& s : out.structures) {
      const StructureMask* orig = raw.find(s.name);
      ASSERT_NE(orig, nullptr);
      for (std::size_t f = 0; f < s.bits.size(); ++f) {
        if (!s.bits[f]) continue;
        const Index3 ijk = s.geometry.unravel(f);
        const Vec3 p = s.geometry.voxel_center(ijk[0], ijk[1], ijk[2]);
        bool near = false;
        for (std::size_t h = 0; h < orig->bits.size() && !near; ++h) {
          if (!orig->bits[h]) continue;
          const Index3 q = orig->geometry.unravel(h);
          const Vec3 c = orig->geometry.voxel_center(q[0], q[1], q[2]);
          near = std::abs(c[0] - p[0]) <= orig->geometry.spacing[0] && std::abs(c[1] - p[1]) <= orig->geometry.spacing[1] &&
                 std::abs(c[2] - p[2]) <= orig->geometry.spacing[2];
        }
        EXPECT_TRUE(near) << s.name;
      }
    }
  }
}

TEST(PrepareCase, StructureLargerThanWindowIsInfeasible) {
  const CaseBundle raw = boxed_case({24, 24, 24}, {10, 10, 8});
  PreprocessConfig cfg;
  cfg.crop_size = {3, 12, 12};
  cfg.net_dims = {4, 4, 4};
  try {
    prepare_case(raw, cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::CropInfeasible);
    EXPECT_NE(std::string(e.what()).find("PTV"), std::string::npos);
  }
}
