#pragma once

// Dose-distribution objectives with analytic gradients with respect to the predicted dose.
// The reference dose is treated as a constant throughout.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "dosekit/error.hpp"
#include "dosekit/rng.hpp"
#include "dosekit/volume.hpp"

namespace dosekit {

enum class LossTerm { MAE, DVH, MOMENT };

inline const char* term_name(LossTerm t) {
  switch (t) {
    case LossTerm::MAE: return "MAE";
    case LossTerm::DVH: return "DVH";
    case LossTerm::MOMENT: return "MOMENT";
  }
  return "?";
}

inline LossTerm parse_term(const std::string& s) {
  if (s == "MAE") return LossTerm::MAE;
  if (s == "DVH") return LossTerm::DVH;
  if (s == "MOMENT") return LossTerm::MOMENT;
  throw Error(ErrorKind::Config, "unknown loss term '" + s + "'");
}

enum class NegativeDosePolicy { Error, Clamp };

/// Moment orders per structure. Structures without an override use `default_orders`.
struct MomentSpec {
  std::vector<int> default_orders{1, 2, 10};
  std::map<std::string, std::vector<int>> overrides;
  bool skip_missing = false;
  // Clamp treats negative voxels as zero dose with zero gradient (used for unconstrained
  // network outputs); Error rejects them.
  NegativeDosePolicy negative = NegativeDosePolicy::Error;

  const std::vector<int>& orders_for(const std::string& name) const {
    auto it = overrides.find(name);
    return it == overrides.end() ? default_orders : it->second;
  }

  void validate() const {
    auto check = [](const std::vector<int>& orders) {
      if (orders.empty()) throw Error(ErrorKind::Config, "moment order list is empty");
      for (std::size_t i = 0; i < orders.size(); ++i) {
        if (orders[i] < 1) throw Error(ErrorKind::Config, "moment orders must be >= 1");
        if (i > 0 && orders[i] <= orders[i - 1]) throw Error(ErrorKind::Config, "moment orders must be strictly increasing");
      }
    };
    check(default_orders);
    for (const auto& [name, orders] : overrides) check(orders);
  }
};

struct DvhLossSpec {
  std::vector<double> thresholds = uniform_thresholds(60, 0.0, 70.0);
  double beta = 1.0;  // Gy

  /// `count` bin centres over [low, high].
  static std::vector<double> uniform_thresholds(int count, double low, double high) {
    if (count < 1 || !(high > low)) throw Error(ErrorKind::Config, "invalid threshold grid");
    std::vector<double> t(static_cast<std::size_t>(count));
    const double width = (high - low) / count;
    for (int i = 0; i < count; ++i) t[static_cast<std::size_t>(i)] = low + (i + 0.5) * width;
    return t;
  }

  void validate() const {
    if (thresholds.empty()) throw Error(ErrorKind::Config, "DVH threshold list is empty");
    for (std::size_t i = 1; i < thresholds.size(); ++i)
      if (!(thresholds[i] > thresholds[i - 1])) throw Error(ErrorKind::Config, "DVH thresholds must be strictly increasing");
    if (!(beta > 0.0)) throw Error(ErrorKind::Config, "beta must be positive");
  }
};

struct LossConfig {
  double w_dvh = 10.0;
  double w_moment = 0.01;
  DvhLossSpec dvh;
  MomentSpec moments;
  std::set<LossTerm> enabled{LossTerm::MAE, LossTerm::MOMENT};

  static LossConfig only(std::set<LossTerm> terms) {
    LossConfig cfg;
    cfg.enabled = std::move(terms);
    return cfg;
  }

  void validate() const {
    if (enabled.empty()) throw Error(ErrorKind::Config, "no loss term enabled");
    if (!(w_dvh >= 0.0) || !(w_moment >= 0.0)) throw Error(ErrorKind::Config, "loss weights must be nonnegative");
    if (enabled.count(LossTerm::DVH)) dvh.validate();
    if (enabled.count(LossTerm::MOMENT)) moments.validate();
  }
};

struct LossValueGrad {
  double value = 0.0;
  Grid3 grad;
  std::map<std::string, double> terms;  // unweighted term values
};

// ---------------------------------------------------------------------------
// scalar helpers

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double ipow(double x, int p) {
  double result = 1.0;
  while (p > 0) {
    if (p & 1) result *= x;
    x *= x;
    p >>= 1;
  }
  return result;
}

namespace detail {

inline void require_same_geometry(const Grid3& a, const Grid3& b) {
  a.validate();
  b.validate();
  if (!(a.geometry == b.geometry)) throw Error(ErrorKind::InvalidGeometry, "dose grids have different geometry");
}

inline std::vector<std::size_t> mask_indices(const Grid3& dose, const StructureMask& mask) {
  if (!(mask.geometry == dose.geometry))
    throw Error(ErrorKind::InvalidGeometry, "mask '" + mask.name + "' differs from dose geometry");
  auto idx = mask.indices();
  if (idx.empty()) throw Error(ErrorKind::EmptyMask, "structure '" + mask.name + "' is empty");
  return idx;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// MAE

inline LossValueGrad mae_loss_grad(const Grid3& pred, const Grid3& ref) {
  detail::require_same_geometry(pred, ref);
  LossValueGrad out;
  out.grad = Grid3(pred.geometry, Unit::Unitless);
  const double n = static_cast<double>(pred.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double diff = pred.values[i] - ref.values[i];
    sum += std::abs(diff);
    out.grad.values[i] = diff > 0.0 ? 1.0 / n : (diff < 0.0 ? -1.0 / n : 0.0);
  }
  out.value = sum / n;
  out.terms["MAE"] = out.value;
  return out;
}

// ---------------------------------------------------------------------------
// sigmoid DVH

struct VolumeAtDose {
  double value = 0.0;
  Grid3 grad;
};

/// Smoothed fraction of the structure receiving at least `d_t`.
inline VolumeAtDose sigmoid_volume_at_dose(const Grid3& dose, const StructureMask& mask, double d_t, double beta) {
  if (!(beta > 0.0)) throw Error(ErrorKind::Config, "beta must be positive");
  dose.validate();
  const auto idx = detail::mask_indices(dose, mask);
  VolumeAtDose out{0.0, Grid3(dose.geometry, Unit::Unitless)};
  const double inv_n = 1.0 / static_cast<double>(idx.size());
  double sum = 0.0;
  for (std::size_t j : idx) {
    const double s = sigmoid((dose.values[j] - d_t) / beta);
    sum += s;
    out.grad.values[j] = s * (1.0 - s) * inv_n / beta;
  }
  out.value = sum * inv_n;
  return out;
}

inline std::vector<double> dvh_vector_approx(const Grid3& dose, const StructureMask& mask, const DvhLossSpec& spec) {
  spec.validate();
  dose.validate();
  const auto idx = detail::mask_indices(dose, mask);
  std::vector<double> v(spec.thresholds.size(), 0.0);
  for (std::size_t t = 0; t < spec.thresholds.size(); ++t) {
    double sum = 0.0;
    for (std::size_t j : idx) sum += sigmoid((dose.values[j] - spec.thresholds[t]) / spec.beta);
    v[t] = sum / static_cast<double>(idx.size());
  }
  return v;
}

inline LossValueGrad dvh_loss_grad(const Grid3& pred, const Grid3& ref, const std::vector<StructureMask>& structures,
                                   const DvhLossSpec& spec) {
  detail::require_same_geometry(pred, ref);
  spec.validate();
  if (structures.empty()) throw Error(ErrorKind::Config, "DVH loss needs at least one structure");

  LossValueGrad out;
  out.grad = Grid3(pred.geometry, Unit::Unitless);
  const std::size_t n_t = spec.thresholds.size();
  const double norm = 1.0 / (static_cast<double>(structures.size()) * static_cast<double>(n_t));
  const double beta = spec.beta;
  double total = 0.0;
  std::vector<double> sig;  // pred sigmoids, [t][voxel]
  for (const auto& s : structures) {
    const auto idx = detail::mask_indices(pred, s);
    const std::size_t nv = idx.size();
    const double inv_n = 1.0 / static_cast<double>(nv);
    sig.assign(n_t * nv, 0.0);
    std::vector<double> coef(n_t, 0.0);
    for (std::size_t t = 0; t < n_t; ++t) {
      const double d_t = spec.thresholds[t];
      double v_pred = 0.0, v_ref = 0.0;
      double* row = sig.data() + t * nv;
      for (std::size_t k = 0; k < nv; ++k) {
        row[k] = sigmoid((pred.values[idx[k]] - d_t) / beta);
        v_pred += row[k];
        v_ref += sigmoid((ref.values[idx[k]] - d_t) / beta);
      }
      const double diff = (v_pred - v_ref) * inv_n;
      total += diff * diff;
      coef[t] = 2.0 * diff * norm * inv_n / beta;
    }
    for (std::size_t k = 0; k < nv; ++k) {
      double g = 0.0;
      for (std::size_t t = 0; t < n_t; ++t) {
        const double sv = sig[t * nv + k];
        g += coef[t] * sv * (1.0 - sv);
      }
      out.grad.values[idx[k]] += g;
    }
  }
  out.value = total * norm;
  out.terms["DVH"] = out.value;
  return out;
}

// ---------------------------------------------------------------------------
// moments

inline constexpr double kMomentEpsilon = 1e-9;  // Gy

struct MomentValue {
  double value = 0.0;
  Grid3 grad;
};

namespace detail {

struct StructureMoments {
  double max_dose = 0.0;
  std::vector<double> values;  // one per order
};

inline double clamped_dose(double d, NegativeDosePolicy policy, const std::string& name) {
  if (d >= 0.0 || std::isnan(d)) return d;
  if (policy == NegativeDosePolicy::Clamp) return 0.0;
  throw Error(ErrorKind::NegativeDose, "negative dose in structure '" + name + "'");
}

// M_p = m * ((1/n) sum (d/m)^p)^(1/p) with m the masked max, so high orders cannot overflow.
inline StructureMoments moments_of(const Grid3& dose, std::span<const std::size_t> idx, std::span<const int> orders,
                                   NegativeDosePolicy policy, const std::string& name) {
  StructureMoments out;
  out.values.assign(orders.size(), 0.0);
  for (std::size_t j : idx) out.max_dose = std::max(out.max_dose, clamped_dose(dose.values[j], policy, name));
  if (!(out.max_dose > 0.0)) return out;
  std::vector<double> sums(orders.size(), 0.0);
  for (std::size_t j : idx) {
    const double x = clamped_dose(dose.values[j], policy, name) / out.max_dose;
    for (std::size_t o = 0; o < orders.size(); ++o) sums[o] += ipow(x, orders[o]);
  }
  const double n = static_cast<double>(idx.size());
  for (std::size_t o = 0; o < orders.size(); ++o)
    out.values[o] = orders[o] == 1 ? out.max_dose * (sums[o] / n)
                                   : out.max_dose * std::pow(sums[o] / n, 1.0 / orders[o]);
  return out;
}

// grad += sum_o coef[o] * dM_{p_o}/dd over the structure voxels.
inline void accumulate_moment_grad(const Grid3& dose, std::span<const std::size_t> idx, std::span<const int> orders,
                                   const StructureMoments& m, std::span<const double> coef, NegativeDosePolicy policy,
                                   Grid3& grad) {
  if (!(m.max_dose > 0.0)) return;
  const double inv_n = 1.0 / static_cast<double>(idx.size());
  std::vector<double> scale(orders.size(), 0.0);
  for (std::size_t o = 0; o < orders.size(); ++o) {
    if (m.values[o] < kMomentEpsilon || coef[o] == 0.0) continue;
    // (M_p/m)^(1-p); the ratio is in [n^(-1/p), 1].
    scale[o] = coef[o] * inv_n * ipow(m.max_dose / m.values[o], orders[o] - 1);
  }
  for (std::size_t j : idx) {
    const double d = dose.values[j];
    if (d < 0.0 && policy == NegativeDosePolicy::Clamp) continue;
    const double x = d / m.max_dose;
    double g = 0.0;
    for (std::size_t o = 0; o < orders.size(); ++o)
      if (scale[o] != 0.0) g += scale[o] * ipow(x, orders[o] - 1);
    grad.values[j] += g;
  }
}

}  // namespace detail

/// Power mean of order p over the structure, with its gradient.
inline MomentValue moment(const Grid3& dose, const StructureMask& mask, int p,
                          NegativeDosePolicy policy = NegativeDosePolicy::Error) {
  if (p < 1) throw Error(ErrorKind::Config, "moment order must be >= 1");
  dose.validate();
  const auto idx = detail::mask_indices(dose, mask);
  const int orders[1] = {p};
  const auto m = detail::moments_of(dose, idx, orders, policy, mask.name);
  MomentValue out{m.values[0], Grid3(dose.geometry, Unit::Unitless)};
  const double coef[1] = {1.0};
  detail::accumulate_moment_grad(dose, idx, orders, m, coef, policy, out.grad);
  return out;
}

inline LossValueGrad moment_loss_grad(const Grid3& pred, const Grid3& ref, const std::vector<StructureMask>& structures,
                                      const MomentSpec& spec) {
  detail::require_same_geometry(pred, ref);
  spec.validate();
  for (const auto& [name, orders] : spec.overrides) {
    const bool present =
        std::any_of(structures.begin(), structures.end(), [&](const StructureMask& s) { return s.name == name; });
    if (!present && !spec.skip_missing)
      throw Error(ErrorKind::Config, "moment spec names structure '" + name + "' which is not in the case");
  }

  LossValueGrad out;
  out.grad = Grid3(pred.geometry, Unit::Unitless);
  double total = 0.0;
  for (const auto& s : structures) {
    const auto idx = detail::mask_indices(pred, s);
    const auto& orders = spec.orders_for(s.name);
    const auto mp = detail::moments_of(pred, idx, orders, spec.negative, s.name);
    const auto mr = detail::moments_of(ref, idx, orders, spec.negative, s.name);
    std::vector<double> coef(orders.size());
    for (std::size_t o = 0; o < orders.size(); ++o) {
      const double diff = mp.values[o] - mr.values[o];
      total += diff * diff;
      coef[o] = 2.0 * diff;
    }
    detail::accumulate_moment_grad(pred, idx, orders, mp, coef, spec.negative, out.grad);
  }
  out.value = total;
  out.terms["MOMENT"] = total;
  return out;
}

/// Weighted sum of the enabled terms: MAE + w_dvh * DVH + w_moment * MOMENT.
inline LossValueGrad total_loss_grad(const Grid3& pred, const Grid3& ref, const std::vector<StructureMask>& structures,
                                     const LossConfig& cfg) {
  cfg.validate();
  detail::require_same_geometry(pred, ref);
  LossValueGrad out;
  out.grad = Grid3(pred.geometry, Unit::Unitless);
  auto add = [&](const LossValueGrad& term, double weight) {
    for (const auto& [k, v] : term.terms) out.terms[k] = v;
    if (weight == 0.0) return;  // keeps the result bit-identical to leaving the term out
    out.value += weight * term.value;
    for (std::size_t i = 0; i < out.grad.size(); ++i) out.grad.values[i] += weight * term.grad.values[i];
  };
  if (cfg.enabled.count(LossTerm::MAE)) add(mae_loss_grad(pred, ref), 1.0);
  if (cfg.enabled.count(LossTerm::DVH)) add(dvh_loss_grad(pred, ref, structures, cfg.dvh), cfg.w_dvh);
  if (cfg.enabled.count(LossTerm::MOMENT)) add(moment_loss_grad(pred, ref, structures, cfg.moments), cfg.w_moment);
  return out;
}

inline double term_weight(const LossConfig& cfg, const std::string& term) {
  if (term == "DVH") return cfg.w_dvh;
  if (term == "MOMENT") return cfg.w_moment;
  return 1.0;
}

// ---------------------------------------------------------------------------
// gradient check

struct GradcheckResult {
  double max_rel_err = 0.0;
  int samples = 0;
  double h = 0.0;
  std::uint64_t seed = 0;
};

using LossFn = std::function<LossValueGrad(const Grid3&)>;

/// Central differences on `samples` random voxels against the analytic gradient. Voxels are drawn
/// from `candidates` when given, otherwise from the whole grid.
inline GradcheckResult finite_difference_gradcheck(const LossFn& loss, const Grid3& pred, double h, int samples,
                                                   std::uint64_t seed,
                                                   std::span<const std::size_t> candidates = {}) {
  if (!(h > 0.0)) throw Error(ErrorKind::Config, "gradcheck step must be positive");
  GradcheckResult result{0.0, samples, h, seed};
  const LossValueGrad analytic = loss(pred);
  Rng rng(seed);
  Grid3 probe = pred;
  for (int s = 0; s < samples; ++s) {
    const std::size_t j = candidates.empty() ? static_cast<std::size_t>(rng.below(pred.size()))
                                             : candidates[static_cast<std::size_t>(rng.below(candidates.size()))];
    const double orig = probe.values[j];
    probe.values[j] = orig + h;
    const double plus = loss(probe).value;
    probe.values[j] = orig - h;
    const double minus = loss(probe).value;
    probe.values[j] = orig;
    const double numeric = (plus - minus) / (2.0 * h);
    const double a = analytic.grad.values[j];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-12});
    result.max_rel_err = std::max(result.max_rel_err, std::abs(a - numeric) / denom);
  }
  return result;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::ordered_json to_json(const LossConfig& cfg) {
  nlohmann::ordered_json j;
  j["terms"] = nlohmann::ordered_json::array();
  for (auto t : cfg.enabled) j["terms"].push_back(term_name(t));
  j["w_dvh"] = cfg.w_dvh;
  j["w_moment"] = cfg.w_moment;
  j["dvh"] = {{"thresholds", cfg.dvh.thresholds}, {"beta", cfg.dvh.beta}};
  nlohmann::ordered_json m;
  m["default"] = cfg.moments.default_orders;
  m["structures"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : cfg.moments.overrides) m["structures"][k] = v;
  m["missing"] = cfg.moments.skip_missing ? "skip" : "error";
  m["negative"] = cfg.moments.negative == NegativeDosePolicy::Clamp ? "clamp" : "error";
  j["moments"] = m;
  return j;
}

/// Accepts the document written by to_json. The DVH grid may be given as explicit
/// "thresholds" or as {"count","min","max"}.
inline LossConfig loss_config_from_json(const nlohmann::json& j) {
  LossConfig cfg;
  try {
    if (j.contains("terms")) {
      cfg.enabled.clear();
      for (const auto& t : j.at("terms")) cfg.enabled.insert(parse_term(t.get<std::string>()));
    }
    cfg.w_dvh = j.value("w_dvh", cfg.w_dvh);
    cfg.w_moment = j.value("w_moment", cfg.w_moment);
    if (j.contains("dvh")) {
      const auto& d = j.at("dvh");
      if (d.contains("thresholds")) {
        cfg.dvh.thresholds = d.at("thresholds").get<std::vector<double>>();
      } else if (d.contains("count")) {
        cfg.dvh.thresholds = DvhLossSpec::uniform_thresholds(d.at("count").get<int>(), d.value("min", 0.0),
                                                             d.value("max", 70.0));
      }
      cfg.dvh.beta = d.value("beta", cfg.dvh.beta);
    }
    if (j.contains("moments")) {
      const auto& m = j.at("moments");
      if (m.contains("default")) cfg.moments.default_orders = m.at("default").get<std::vector<int>>();
      if (m.contains("structures"))
        for (const auto& [k, v] : m.at("structures").items()) cfg.moments.overrides[k] = v.get<std::vector<int>>();
      cfg.moments.skip_missing = m.value("missing", std::string("error")) == "skip";
      cfg.moments.negative =
          m.value("negative", std::string("error")) == "clamp" ? NegativeDosePolicy::Clamp : NegativeDosePolicy::Error;
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Config, std::string("malformed loss config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

}  // namespace dosekit
