#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "dosekit/error.hpp"

namespace dosekit {

using Index3 = std::array<int, 3>;
using Vec3 = std::array<double, 3>;

enum class Unit { HU, Gy, Unitless };

inline std::string_view unit_name(Unit unit) {
  switch (unit) {
    case Unit::HU: return "HU";
    case Unit::Gy: return "Gy";
    case Unit::Unitless: return "unitless";
  }
  return "unitless";
}

inline Unit parse_unit(std::string_view name) {
  if (name == "HU") return Unit::HU;
  if (name == "Gy") return Unit::Gy;
  if (name == "unitless") return Unit::Unitless;
  throw Error(ErrorKind::Config, "unknown unit '" + std::string(name) + "'");
}

/// Grid bookkeeping. Voxel (i,j,k) is centred at origin + (i+0.5, j+0.5, k+0.5) * spacing,
/// so `origin` is the outer corner of voxel (0,0,0). Storage order is x-fastest.
struct GridGeometry {
  Index3 dims{1, 1, 1};
  Vec3 spacing{1.0, 1.0, 1.0};  // mm
  Vec3 origin{0.0, 0.0, 0.0};   // mm

  bool operator==(const GridGeometry&) const = default;

  std::size_t voxel_count() const {
    return static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]) *
           static_cast<std::size_t>(dims[2]);
  }

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (dims[a] < 1) throw Error(ErrorKind::InvalidGeometry, "dims must be >= 1");
      if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a]))
        throw Error(ErrorKind::InvalidGeometry, "spacing must be positive and finite");
      if (!std::isfinite(origin[a])) throw Error(ErrorKind::InvalidGeometry, "origin must be finite");
    }
  }

  std::size_t index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(dims[0]) *
               (static_cast<std::size_t>(j) + static_cast<std::size_t>(dims[1]) * static_cast<std::size_t>(k));
  }

  Index3 unravel(std::size_t flat) const {
    const auto nx = static_cast<std::size_t>(dims[0]);
    const auto ny = static_cast<std::size_t>(dims[1]);
    return {static_cast<int>(flat % nx), static_cast<int>((flat / nx) % ny), static_cast<int>(flat / (nx * ny))};
  }

  Vec3 voxel_center(int i, int j, int k) const {
    return {origin[0] + (i + 0.5) * spacing[0], origin[1] + (j + 0.5) * spacing[1],
            origin[2] + (k + 0.5) * spacing[2]};
  }

  Vec3 extent() const { return {dims[0] * spacing[0], dims[1] * spacing[1], dims[2] * spacing[2]}; }
};

/// Geometry with `dims` voxels spanning the same physical box as `geometry`.
inline GridGeometry same_extent(const GridGeometry& geometry, Index3 dims) {
  GridGeometry out;
  out.dims = dims;
  out.origin = geometry.origin;
  const Vec3 ext = geometry.extent();
  for (int a = 0; a < 3; ++a) out.spacing[a] = ext[a] / dims[a];
  return out;
}

struct Grid3 {
  GridGeometry geometry;
  std::vector<double> values;
  Unit unit = Unit::Unitless;

  Grid3() = default;
  Grid3(const GridGeometry& g, Unit u, double fill = 0.0) : geometry(g), values(g.voxel_count(), fill), unit(u) {}

  std::size_t size() const { return values.size(); }
  double& at(int i, int j, int k) { return values[geometry.index(i, j, k)]; }
  double at(int i, int j, int k) const { return values[geometry.index(i, j, k)]; }

  void validate() const {
    geometry.validate();
    if (values.size() != geometry.voxel_count())
      throw Error(ErrorKind::InvalidGeometry, "value count does not match geometry");
  }
};

enum class Role { PTV, OAR };

inline std::string_view role_name(Role role) { return role == Role::PTV ? "PTV" : "OAR"; }

inline Role parse_role(std::string_view name) {
  if (name == "PTV") return Role::PTV;
  if (name == "OAR") return Role::OAR;
  throw Error(ErrorKind::Config, "unknown structure role '" + std::string(name) + "'");
}

struct StructureMask {
  GridGeometry geometry;
  std::vector<std::uint8_t> bits;  // 0 or 1
  std::string name;
  Role role = Role::OAR;

  StructureMask() = default;
  StructureMask(const GridGeometry& g, std::string n, Role r)
      : geometry(g), bits(g.voxel_count(), 0), name(std::move(n)), role(r) {}

  bool operator==(const StructureMask&) const = default;

  std::size_t count() const {
    return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
  }
  bool empty() const { return count() == 0; }

  std::vector<std::size_t> indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < bits.size(); ++i)
      if (bits[i]) out.push_back(i);
    return out;
  }

  bool at(int i, int j, int k) const { return bits[geometry.index(i, j, k)] != 0; }
};

struct CaseBundle {
  Grid3 ct;
  Grid3 dose;
  std::vector<StructureMask> structures;
  std::string case_id;

  const StructureMask* find(std::string_view name) const {
    for (const auto& s : structures)
      if (s.name == name) return &s;
    return nullptr;
  }

  const StructureMask& ptv() const {
    const StructureMask* found = nullptr;
    for (const auto& s : structures) {
      if (s.role != Role::PTV) continue;
      if (found) throw Error(ErrorKind::Config, "case '" + case_id + "' has more than one PTV");
      found = &s;
    }
    if (!found) throw Error(ErrorKind::Config, "case '" + case_id + "' has no PTV");
    return *found;
  }
};

/// Inclusive-exclusive voxel box.
struct IndexBox {
  Index3 lower{0, 0, 0};
  Index3 upper{0, 0, 0};  // exclusive
  bool empty() const { return upper[0] <= lower[0] || upper[1] <= lower[1] || upper[2] <= lower[2]; }
};

inline IndexBox bounding_box(const StructureMask& mask) {
  IndexBox box{{mask.geometry.dims[0], mask.geometry.dims[1], mask.geometry.dims[2]}, {0, 0, 0}};
  for (std::size_t f = 0; f < mask.bits.size(); ++f) {
    if (!mask.bits[f]) continue;
    const Index3 ijk = mask.geometry.unravel(f);
    for (int a = 0; a < 3; ++a) {
      box.lower[a] = std::min(box.lower[a], ijk[a]);
      box.upper[a] = std::max(box.upper[a], ijk[a] + 1);
    }
  }
  return box;
}

namespace detail {

// Continuous source index along one axis for a physical coordinate, clamped to [0, n-1].
inline double source_coordinate(double physical, double origin, double spacing, int n) {
  const double u = (physical - origin) / spacing - 0.5;
  return std::clamp(u, 0.0, static_cast<double>(n - 1));
}

inline void check_crop(const GridGeometry& g, Index3 lower, Index3 size) {
  for (int a = 0; a < 3; ++a) {
    if (size[a] < 1 || lower[a] < 0 || lower[a] + size[a] > g.dims[a])
      throw Error(ErrorKind::Bounds, "crop window outside grid along axis " + std::to_string(a));
  }
}

inline GridGeometry cropped_geometry(const GridGeometry& g, Index3 lower, Index3 size) {
  GridGeometry out = g;
  out.dims = size;
  for (int a = 0; a < 3; ++a) out.origin[a] = g.origin[a] + lower[a] * g.spacing[a];
  return out;
}

}  // namespace detail

/// Trilinear interpolation in physical coordinates; samples outside the source extent clamp to the
/// nearest voxel.
inline Grid3 trilinear_resample(const Grid3& src, const GridGeometry& target) {
  src.validate();
  target.validate();
  if (src.geometry == target) return src;

  Grid3 out(target, src.unit);
  const auto& sg = src.geometry;
  const int nx = sg.dims[0], ny = sg.dims[1], nz = sg.dims[2];

  struct Axis {
    std::vector<int> i0, i1;
    std::vector<double> t;
  };
  auto build_axis = [&](int a, int n_src) {
    Axis ax;
    for (int i = 0; i < target.dims[a]; ++i) {
      const double p = target.origin[a] + (i + 0.5) * target.spacing[a];
      const double u = detail::source_coordinate(p, sg.origin[a], sg.spacing[a], n_src);
      const int lo = static_cast<int>(std::floor(u));
      const int hi = std::min(lo + 1, n_src - 1);
      ax.i0.push_back(lo);
      ax.i1.push_back(hi);
      ax.t.push_back(u - lo);
    }
    return ax;
  };
  const Axis ax = build_axis(0, nx), ay = build_axis(1, ny), az = build_axis(2, nz);

  for (int k = 0; k < target.dims[2]; ++k) {
    for (int j = 0; j < target.dims[1]; ++j) {
      for (int i = 0; i < target.dims[0]; ++i) {
        const double tx = ax.t[i], ty = ay.t[j], tz = az.t[k];
        auto v = [&](int xi, int yi, int zi) { return src.at(xi, yi, zi); };
        const double c00 = v(ax.i0[i], ay.i0[j], az.i0[k]) * (1 - tx) + v(ax.i1[i], ay.i0[j], az.i0[k]) * tx;
        const double c10 = v(ax.i0[i], ay.i1[j], az.i0[k]) * (1 - tx) + v(ax.i1[i], ay.i1[j], az.i0[k]) * tx;
        const double c01 = v(ax.i0[i], ay.i0[j], az.i1[k]) * (1 - tx) + v(ax.i1[i], ay.i0[j], az.i1[k]) * tx;
        const double c11 = v(ax.i0[i], ay.i1[j], az.i1[k]) * (1 - tx) + v(ax.i1[i], ay.i1[j], az.i1[k]) * tx;
        const double c0 = c00 * (1 - ty) + c10 * ty;
        const double c1 = c01 * (1 - ty) + c11 * ty;
        out.at(i, j, k) = c0 * (1 - tz) + c1 * tz;
      }
    }
  }
  return out;
}

/// Nearest-neighbour mask resampling by voxel-centre distance (ties round toward the higher index).
inline StructureMask resample_mask(const StructureMask& src, const GridGeometry& target) {
  src.geometry.validate();
  target.validate();
  if (src.geometry == target) return src;

  StructureMask out(target, src.name, src.role);
  std::array<std::vector<int>, 3> nearest;
  for (int a = 0; a < 3; ++a) {
    for (int i = 0; i < target.dims[a]; ++i) {
      const double p = target.origin[a] + (i + 0.5) * target.spacing[a];
      const double u = detail::source_coordinate(p, src.geometry.origin[a], src.geometry.spacing[a], src.geometry.dims[a]);
      nearest[a].push_back(std::min(static_cast<int>(std::floor(u + 0.5)), src.geometry.dims[a] - 1));
    }
  }
  for (int k = 0; k < target.dims[2]; ++k)
    for (int j = 0; j < target.dims[1]; ++j)
      for (int i = 0; i < target.dims[0]; ++i)
        out.bits[target.index(i, j, k)] = src.at(nearest[0][i], nearest[1][j], nearest[2][k]) ? 1 : 0;
  return out;
}

inline Grid3 crop_region(const Grid3& grid, Index3 lower, Index3 size) {
  grid.validate();
  detail::check_crop(grid.geometry, lower, size);
  Grid3 out(detail::cropped_geometry(grid.geometry, lower, size), grid.unit);
  for (int k = 0; k < size[2]; ++k)
    for (int j = 0; j < size[1]; ++j)
      for (int i = 0; i < size[0]; ++i) out.at(i, j, k) = grid.at(lower[0] + i, lower[1] + j, lower[2] + k);
  return out;
}

inline StructureMask crop_region(const StructureMask& mask, Index3 lower, Index3 size) {
  mask.geometry.validate();
  detail::check_crop(mask.geometry, lower, size);
  StructureMask out(detail::cropped_geometry(mask.geometry, lower, size), mask.name, mask.role);
  for (int k = 0; k < size[2]; ++k)
    for (int j = 0; j < size[1]; ++j)
      for (int i = 0; i < size[0]; ++i)
        out.bits[out.geometry.index(i, j, k)] = mask.bits[mask.geometry.index(lower[0] + i, lower[1] + j, lower[2] + k)];
  return out;
}

/// Voxel volume in cm^3.
inline double voxel_volume_cc(const GridGeometry& geometry) {
  geometry.validate();
  return geometry.spacing[0] * geometry.spacing[1] * geometry.spacing[2] / 1000.0;
}

}  // namespace dosekit
