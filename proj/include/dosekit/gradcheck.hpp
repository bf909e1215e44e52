#pragma once

#include <cstdint>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"

#include "dosekit/losses.hpp"
#include "dosekit/rng.hpp"

namespace dosekit {

/// Random doses on an n^3 grid with three random masks; pred is kept 1e-2 away from ref voxelwise.
struct GradcheckInstance {
  Grid3 pred, ref;
  std::vector<StructureMask> structures;
};

inline GradcheckInstance random_gradcheck_instance(std::uint64_t seed, int n = 16) {
  Rng rng(seed);
  GridGeometry g;
  g.dims = {n, n, n};
  GradcheckInstance r{Grid3(g, Unit::Gy), Grid3(g, Unit::Gy), {}};
  for (double& v : r.pred.values) v = rng.uniform(5.0, 70.0);
  for (double& v : r.ref.values) v = rng.uniform(5.0, 70.0);
  for (std::size_t i = 0; i < r.pred.size(); ++i)
    if (std::abs(r.pred.values[i] - r.ref.values[i]) < 1e-2) r.pred.values[i] += 0.5;
  const std::vector<std::tuple<std::string, Role, double>> masks{
      {"PTV", Role::PTV, 0.05}, {"Cord", Role::OAR, 0.03}, {"Heart", Role::OAR, 0.04}};
  for (const auto& [name, role, density] : masks) {
    StructureMask m(g, name, role);
    for (auto& b : m.bits) b = rng.uniform() < density;
    if (m.empty()) m.bits[rng.below(m.bits.size())] = 1;
    r.structures.push_back(std::move(m));
  }
  return r;
}

struct TermGradcheck {
  std::string term;
  GradcheckResult result;
};

/// Checks each enabled term of `cfg` on its own (unweighted). DVH and moment terms sample
/// voxels inside the structures; MAE samples the whole grid.
inline std::vector<TermGradcheck> gradcheck_terms(const LossConfig& cfg, const GradcheckInstance& inst, int samples,
                                                  double h, std::uint64_t seed) {
  cfg.validate();
  std::vector<std::size_t> inside;
  for (const auto& s : inst.structures)
    for (auto i : s.indices()) inside.push_back(i);
  std::vector<TermGradcheck> out;
  for (LossTerm t : cfg.enabled) {
    LossFn fn;
    switch (t) {
      case LossTerm::MAE: fn = [&](const Grid3& p) { return mae_loss_grad(p, inst.ref); }; break;
      case LossTerm::DVH: fn = [&](const Grid3& p) { return dvh_loss_grad(p, inst.ref, inst.structures, cfg.dvh); }; break;
      case LossTerm::MOMENT:
        fn = [&](const Grid3& p) { return moment_loss_grad(p, inst.ref, inst.structures, cfg.moments); };
        break;
    }
    const std::span<const std::size_t> cand =
        t == LossTerm::MAE ? std::span<const std::size_t>{} : std::span<const std::size_t>(inside);
    out.push_back({term_name(t), finite_difference_gradcheck(fn, inst.pred, h, samples, seed, cand)});
  }
  return out;
}

/// Tolerance on the relative error for each term.
inline double gradcheck_tolerance(const std::string& term) { return term == "MAE" ? 1e-6 : 1e-4; }

inline nlohmann::ordered_json to_json(const TermGradcheck& g) {
  return {{"term", g.term},
          {"max_rel_err", g.result.max_rel_err},
          {"samples", g.result.samples},
          {"h", g.result.h},
          {"seed", g.result.seed}};
}

}  // namespace dosekit
