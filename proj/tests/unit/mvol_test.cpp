#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "dosekit/mvol.hpp"
#include "test_util.hpp"

using namespace dosekit;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(Mvol, HeaderLayout) {
  GridGeometry g;
  g.dims = {2, 1, 1};
  g.spacing = {2.5, 2.5, 3.0};
  g.origin = {-1.0, 0.0, 4.5};
  Grid3 grid(g, Unit::Gy);
  grid.values = {1.0, -2.0};
  std::ostringstream out;
  write_mvol(out, grid);
  const std::string bytes = out.str();
  const std::string header =
      "MVOL1\n{\"dims\":[2,1,1],\"spacing\":[2.5,2.5,3.0],\"origin\":[-1.0,0.0,4.5],\"unit\":\"Gy\",\"dtype\":\"f32le\"}\n";
  ASSERT_EQ(bytes.substr(0, header.size()), header);
  ASSERT_EQ(bytes.size(), header.size() + 8);
  // 1.0f = 0x3f800000, -2.0f = 0xc0000000, little-endian
  const std::string payload = bytes.substr(header.size());
  EXPECT_EQ(payload, std::string("\x00\x00\x80\x3f\x00\x00\x00\xc0", 8));
}

TEST(Mvol, GridRoundTripIsBitExact) {
  Rng rng(42);
  GridGeometry g;
  g.dims = {5, 3, 4};
  g.spacing = {1.25, 0.975, 3.3};
  g.origin = {-12.5, 7.0, 0.1};
  Grid3 grid = dosekit::testing::random_grid(g, rng, -1000.0, 3000.0, Unit::HU);
  std::ostringstream first;
  write_mvol(first, grid);
  std::istringstream in(first.str());
  const Grid3 back = read_mvol_grid(in);
  EXPECT_EQ(back.geometry, grid.geometry);
  EXPECT_EQ(back.unit, Unit::HU);
  for (std::size_t i = 0; i < grid.size(); ++i) EXPECT_EQ(back.values[i], static_cast<double>(static_cast<float>(grid.values[i])));
  std::ostringstream second;
  write_mvol(second, back);
  EXPECT_EQ(first.str(), second.str());
}

TEST(Mvol, MaskRoundTrip) {
  Rng rng(1);
  GridGeometry g;
  g.dims = {6, 5, 4};
  const StructureMask m = dosekit::testing::random_mask(g, rng, 0.4, "Heart");
  std::ostringstream out;
  write_mvol(out, m);
  EXPECT_NE(out.str().find("\"dtype\":\"u8\""), std::string::npos);
  std::istringstream in(out.str());
  const StructureMask back = read_mvol_mask(in, "Heart", Role::OAR);
  EXPECT_EQ(back, m);
}

TEST(Mvol, RejectsBadInput) {
  {
    std::istringstream in("MVOL2\n{}\n");
    EXPECT_THROW(read_mvol_grid(in), Error);
  }
  {
    std::istringstream in(
        "MVOL1\n{\"dims\":[2,1,1],\"spacing\":[1,1,1],\"origin\":[0,0,0],\"unit\":\"Gy\",\"dtype\":\"f32le\"}\n\x01\x02");
    EXPECT_THROW(read_mvol_grid(in), Error);
  }
  {
    std::istringstream in(
        "MVOL1\n{\"dims\":[1,1,1],\"spacing\":[1,1,1],\"origin\":[0,0,0],\"unit\":\"unitless\",\"dtype\":\"u8\"}\n\x02");
    EXPECT_THROW(read_mvol_mask(in), Error);
  }
}

TEST(Mvol, CaseDirectoryRoundTrip) {
  Rng rng(8);
  GridGeometry g;
  g.dims = {4, 4, 3};
  g.spacing = {3, 3, 3};
  CaseBundle c;
  c.case_id = "roundtrip";
  c.ct = dosekit::testing::random_grid(g, rng, -1000, 500, Unit::HU);
  c.dose = dosekit::testing::random_grid(g, rng, 0, 60, Unit::Gy);
  c.structures.push_back(dosekit::testing::random_mask(g, rng, 0.3, "PTV", Role::PTV));
  c.structures.push_back(dosekit::testing::random_mask(g, rng, 0.3, "Cord"));
  const auto dir = dosekit::testing::temp_dir("case_roundtrip");
  save_case(dir, c);
  const CaseBundle back = load_case(dir);
  EXPECT_EQ(back.case_id, "roundtrip");
  ASSERT_EQ(back.structures.size(), 2u);
  EXPECT_EQ(back.structures[0], c.structures[0]);
  EXPECT_EQ(back.structures[1], c.structures[1]);
  EXPECT_EQ(back.ptv().name, "PTV");
  const auto dose_bytes = slurp(dir / "dose.mvol");
  save_case(dir, back);
  EXPECT_EQ(slurp(dir / "dose.mvol"), dose_bytes);
}
