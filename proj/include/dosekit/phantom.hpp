#pragma once

// Deterministic synthetic thorax phantoms. Shapes are placed in fractions of the volume
// extent so the same layout works at any resolution; the PTV is a seeded ellipsoid in one
// lung. Reference dose = Rx * exp(-distance to PTV / falloff) * (1 + smooth modulation)
// + scatter, normalised to a PTV mean of Rx.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <numbers>
#include <string>
#include <vector>

#include "json.hpp"

#include "dosekit/error.hpp"
#include "dosekit/mvol.hpp"
#include "dosekit/preprocess.hpp"
#include "dosekit/rng.hpp"
#include "dosekit/volume.hpp"

namespace dosekit {

struct Ellipsoid {
  Vec3 center{};  // fraction of extent
  Vec3 radii{};   // fraction of extent
};

struct PhantomSpec {
  std::uint64_t seed = 0;
  Index3 dims{32, 32, 32};
  Vec3 spacing{8.0, 8.0, 8.0};  // mm
  double prescription = 60.0;   // Gy
  double falloff_mm = 15.0;
  double scatter_fraction = 0.05;
  double heterogeneity = 0.03;  // relative amplitude of the smooth in-field modulation
  double ct_noise_hu = 20.0;
  double ptv_min_radius = 0.07;
  double ptv_max_radius = 0.11;
  double cord_margin_mm = 8.0;  // minimum PTV-to-cord distance
  int max_attempts = 10;
};

namespace detail {

inline double ellipsoid_value(const Vec3& p, const Ellipsoid& e) {
  double s = 0.0;
  for (int a = 0; a < 3; ++a) {
    const double d = (p[a] - e.center[a]) / e.radii[a];
    s += d * d;
  }
  return s;
}

struct PhantomLayout {
  Ellipsoid ptv;
  double phase[3] = {0, 0, 0};
};

inline PhantomLayout draw_layout(Rng& rng, const PhantomSpec& spec) {
  PhantomLayout layout;
  const bool left = rng.uniform() < 0.5;
  const double lung_cx = left ? 0.73 : 0.27;
  layout.ptv.center = {lung_cx + rng.uniform(-0.08, 0.08), rng.uniform(0.38, 0.58), rng.uniform(0.45, 0.65)};
  for (int a = 0; a < 3; ++a) layout.ptv.radii[a] = rng.uniform(spec.ptv_min_radius, spec.ptv_max_radius);
  for (double& ph : layout.phase) ph = rng.uniform(0.0, 2.0 * std::numbers::pi);
  return layout;
}

}  // namespace detail

inline CaseBundle generate_phantom(const PhantomSpec& spec) {
  GridGeometry geom;
  geom.dims = spec.dims;
  geom.spacing = spec.spacing;
  geom.validate();
  if (!(spec.falloff_mm > 0.0) || !(spec.prescription > 0.0))
    throw Error(ErrorKind::Config, "phantom falloff and prescription must be positive");

  Rng rng(spec.seed);
  const Vec3 ext = geom.extent();
  const std::size_t n = geom.voxel_count();
  std::vector<Vec3> frac(n);
  for (int k = 0; k < geom.dims[2]; ++k)
    for (int j = 0; j < geom.dims[1]; ++j)
      for (int i = 0; i < geom.dims[0]; ++i) {
        const Vec3 c = geom.voxel_center(i, j, k);
        frac[geom.index(i, j, k)] = {(c[0] - geom.origin[0]) / ext[0], (c[1] - geom.origin[1]) / ext[1],
                                     (c[2] - geom.origin[2]) / ext[2]};
      }

  auto cylinder = [](const Vec3& p, double cx, double cy, double r) {
    const double dx = p[0] - cx, dy = p[1] - cy;
    return dx * dx + dy * dy <= r * r && p[2] >= 0.05 && p[2] <= 0.95;
  };
  const Ellipsoid heart{{0.55, 0.33, 0.35}, {0.14, 0.14, 0.14}};
  const Ellipsoid lung_l{{0.73, 0.50, 0.25}, {0.17, 0.30, 0.70}};
  const Ellipsoid lung_r{{0.27, 0.50, 0.25}, {0.17, 0.30, 0.70}};
  const Ellipsoid body{{0.50, 0.50, 0.50}, {0.47, 0.42, 10.0}};

  StructureMask ptv(geom, "PTV", Role::PTV);
  StructureMask eso(geom, "Esophagus", Role::OAR), cord(geom, "Cord", Role::OAR), hrt(geom, "Heart", Role::OAR);
  StructureMask lung_left(geom, "Lung_L", Role::OAR), lung_right(geom, "Lung_R", Role::OAR);
  std::vector<std::uint8_t> in_body(n, 0);

  for (std::size_t v = 0; v < n; ++v) {
    const Vec3& p = frac[v];
    in_body[v] = detail::ellipsoid_value(p, body) <= 1.0;
    cord.bits[v] = cylinder(p, 0.50, 0.80, 0.04);
    eso.bits[v] = !cord.bits[v] && cylinder(p, 0.50, 0.68, 0.045);
    hrt.bits[v] = detail::ellipsoid_value(p, heart) <= 1.0;
  }

  // PTV placement; redraw while it overlaps or crowds the cord.
  detail::PhantomLayout layout;
  bool placed = false;
  for (int attempt = 0; attempt < spec.max_attempts && !placed; ++attempt) {
    layout = detail::draw_layout(rng, spec);
    std::fill(ptv.bits.begin(), ptv.bits.end(), 0);
    for (std::size_t v = 0; v < n; ++v) ptv.bits[v] = detail::ellipsoid_value(frac[v], layout.ptv) <= 1.0;
    if (ptv.empty()) continue;
    placed = true;
    for (std::size_t a = 0; a < n && placed; ++a) {
      if (!ptv.bits[a]) continue;
      const auto pa = geom.unravel(a);
      for (std::size_t b = 0; b < n; ++b) {
        if (!cord.bits[b]) continue;
        const auto pb = geom.unravel(b);
        double d2 = 0.0;
        for (int ax = 0; ax < 3; ++ax) {
          const double d = (pa[ax] - pb[ax]) * geom.spacing[ax];
          d2 += d * d;
        }
        if (d2 < spec.cord_margin_mm * spec.cord_margin_mm) {
          placed = false;
          break;
        }
      }
    }
  }
  if (!placed) throw Error(ErrorKind::Config, "could not place a PTV clear of the cord in " +
                                                  std::to_string(spec.max_attempts) + " attempts");

  for (std::size_t v = 0; v < n; ++v) {
    const Vec3& p = frac[v];
    const bool soft = cord.bits[v] || eso.bits[v] || hrt.bits[v] || ptv.bits[v];
    lung_left.bits[v] = !soft && p[2] >= lung_l.center[2] && detail::ellipsoid_value(p, lung_l) <= 1.0;
    lung_right.bits[v] = !soft && p[2] >= lung_r.center[2] && detail::ellipsoid_value(p, lung_r) <= 1.0;
    if (ptv.bits[v] || cord.bits[v] || eso.bits[v] || hrt.bits[v] || lung_left.bits[v] || lung_right.bits[v])
      in_body[v] = 1;
  }

  // Distance (mm) from each voxel centre to the nearest PTV boundary voxel centre; 0 inside.
  std::vector<std::size_t> boundary;
  for (std::size_t v = 0; v < n; ++v) {
    if (!ptv.bits[v]) continue;
    const auto ijk = geom.unravel(v);
    bool edge = false;
    for (int a = 0; a < 3 && !edge; ++a)
      for (int s : {-1, 1}) {
        Index3 q = ijk;
        q[a] += s;
        if (q[a] < 0 || q[a] >= geom.dims[a] || !ptv.bits[geom.index(q[0], q[1], q[2])]) {
          edge = true;
          break;
        }
      }
    if (edge) boundary.push_back(v);
  }

  Grid3 dose(geom, Unit::Gy);
  Grid3 ct(geom, Unit::HU);
  const double two_pi = 2.0 * std::numbers::pi;
  for (std::size_t v = 0; v < n; ++v) {
    double dist = 0.0;
    if (!ptv.bits[v]) {
      const auto pv = geom.unravel(v);
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t b : boundary) {
        const auto pb = geom.unravel(b);
        double d2 = 0.0;
        for (int ax = 0; ax < 3; ++ax) {
          const double d = (pv[ax] - pb[ax]) * geom.spacing[ax];
          d2 += d * d;
        }
        best = std::min(best, d2);
      }
      dist = std::sqrt(best);
    }
    const Vec3& p = frac[v];
    const double modulation = std::sin(two_pi * 1.5 * p[0] + layout.phase[0]) *
                              std::cos(two_pi * 1.5 * p[1] + layout.phase[1]) *
                              std::sin(two_pi * 1.0 * p[2] + layout.phase[2]);
    const double primary = spec.prescription * std::exp(-dist / spec.falloff_mm) * (1.0 + spec.heterogeneity * modulation);
    const double scatter = in_body[v] ? spec.scatter_fraction * spec.prescription : 0.0;
    dose.values[v] = std::max(0.0, primary + scatter);

    double hu = -1000.0;
    if (in_body[v]) hu = 40.0;
    if (lung_left.bits[v] || lung_right.bits[v]) hu = -700.0;
    if (ptv.bits[v]) hu = 60.0;
    ct.values[v] = hu + rng.normal(0.0, spec.ct_noise_hu);
  }

  CaseBundle bundle;
  bundle.case_id = "case_" + std::to_string(spec.seed);
  bundle.ct = std::move(ct);
  bundle.structures = {ptv, eso, cord, hrt, lung_left, lung_right};
  bundle.dose = normalize_ptv_mean(dose, bundle.structures.front(), spec.prescription).dose;
  return bundle;
}

// ---------------------------------------------------------------------------
// datasets

struct SplitCounts {
  int train = 24;
  int val = 5;
  int test = 7;
  int total() const { return train + val + test; }
};

/// The 24/5/7 proportions applied to n cases; rounding remainder goes to train.
inline SplitCounts default_split(int n) {
  if (n == 36) return {};
  SplitCounts s;
  s.val = n * 5 / 36;
  s.test = n * 7 / 36;
  s.train = n - s.val - s.test;
  return s;
}

struct ManifestEntry {
  std::string case_id;
  std::string dir;  // relative to the manifest
  std::uint64_t seed = 0;
  std::string split;
};

struct Manifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> cases;

  std::vector<ManifestEntry> subset(const std::string& split) const {
    std::vector<ManifestEntry> out;
    for (const auto& c : cases)
      if (c.split == split) out.push_back(c);
    return out;
  }
  std::filesystem::path case_dir(const ManifestEntry& e) const { return root / e.dir; }
};

inline Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open manifest " + path.string());
  Manifest m;
  m.root = path.parent_path();
  try {
    nlohmann::json j;
    in >> j;
    for (const auto& c : j.at("cases"))
      m.cases.push_back({c.at("case_id").get<std::string>(), c.at("dir").get<std::string>(),
                         c.at("seed").get<std::uint64_t>(), c.at("split").get<std::string>()});
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Io, std::string("malformed manifest: ") + e.what());
  }
  return m;
}

/// Writes n cases (seeds base_seed..base_seed+n-1) as case directories plus manifest.json.
inline Manifest generate_dataset(int n, std::uint64_t base_seed, const PhantomSpec& base,
                                 const std::filesystem::path& out_dir, std::optional<SplitCounts> split = {}) {
  if (n < 1) throw Error(ErrorKind::Config, "dataset needs at least one case");
  const SplitCounts counts = split.value_or(default_split(n));
  if (counts.total() != n || counts.train < 0 || counts.val < 0 || counts.test < 0)
    throw Error(ErrorKind::Config, "split does not add up to the case count");

  std::filesystem::create_directories(out_dir);
  Manifest manifest;
  manifest.root = out_dir;
  nlohmann::ordered_json j;
  j["base_seed"] = base_seed;
  j["dims"] = {base.dims[0], base.dims[1], base.dims[2]};
  j["split"] = {{"train", counts.train}, {"val", counts.val}, {"test", counts.test}};
  j["cases"] = nlohmann::ordered_json::array();
  for (int c = 0; c < n; ++c) {
    PhantomSpec spec = base;
    spec.seed = base_seed + static_cast<std::uint64_t>(c);
    const CaseBundle bundle = generate_phantom(spec);
    const std::string split_name = c < counts.train ? "train" : (c < counts.train + counts.val ? "val" : "test");
    save_case(out_dir / bundle.case_id, bundle);
    manifest.cases.push_back({bundle.case_id, bundle.case_id, spec.seed, split_name});
    j["cases"].push_back({{"case_id", bundle.case_id}, {"dir", bundle.case_id}, {"seed", spec.seed}, {"split", split_name}});
  }
  std::ofstream out(out_dir / "manifest.json");
  if (!out) throw Error(ErrorKind::Io, "cannot write manifest in " + out_dir.string());
  out << j.dump(2) << "\n";
  return manifest;
}

}  // namespace dosekit
