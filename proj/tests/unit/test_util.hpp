#pragma once

#include <filesystem>
#include <string>

#include "dosekit/rng.hpp"
#include "dosekit/volume.hpp"

namespace dosekit::testing {

inline Grid3 line_grid(std::initializer_list<double> values, Unit unit = Unit::Gy) {
  GridGeometry g;
  g.dims = {static_cast<int>(values.size()), 1, 1};
  Grid3 out(g, unit);
  std::size_t i = 0;
  for (double v : values) out.values[i++] = v;
  return out;
}

inline StructureMask full_mask(const GridGeometry& g, std::string name = "S", Role role = Role::OAR) {
  StructureMask m(g, std::move(name), role);
  std::fill(m.bits.begin(), m.bits.end(), 1);
  return m;
}

inline Grid3 random_grid(const GridGeometry& g, Rng& rng, double low, double high, Unit unit = Unit::Gy) {
  Grid3 out(g, unit);
  for (double& v : out.values) v = rng.uniform(low, high);
  return out;
}

inline StructureMask random_mask(const GridGeometry& g, Rng& rng, double density, std::string name = "S",
                                 Role role = Role::OAR) {
  StructureMask m(g, std::move(name), role);
  for (auto& b : m.bits) b = rng.uniform() < density;
  if (m.empty()) m.bits[rng.below(m.bits.size())] = 1;
  return m;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("dosekit_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace dosekit::testing
