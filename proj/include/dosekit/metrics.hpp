#pragma once

// Exact (non-differentiable) dose evaluation: DVH curves, dose and DVH scores,
// homogeneity / conformity indices and the clinical criteria report.

#include <algorithm>
#include <limits>
#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "dosekit/error.hpp"
#include "dosekit/volume.hpp"

namespace dosekit {

struct DvhCurve {
  std::string structure;
  std::vector<double> edges;      // Gy
  std::vector<double> fractions;  // fraction of the structure receiving >= edge
};

namespace detail {

inline std::vector<double> masked_doses(const Grid3& dose, const StructureMask& mask) {
  if (!(mask.geometry == dose.geometry))
    throw Error(ErrorKind::InvalidGeometry, "mask '" + mask.name + "' differs from dose geometry");
  std::vector<double> out;
  for (std::size_t i = 0; i < mask.bits.size(); ++i)
    if (mask.bits[i]) out.push_back(dose.values[i]);
  if (out.empty()) throw Error(ErrorKind::EmptyMask, "structure '" + mask.name + "' is empty");
  return out;
}

inline std::vector<double> sorted_descending(std::vector<double> v) {
  std::sort(v.begin(), v.end(), std::greater<>());
  return v;
}

inline std::vector<double> union_doses(const Grid3& dose, const std::vector<const StructureMask*>& masks) {
  std::vector<double> out;
  for (std::size_t i = 0; i < dose.size(); ++i) {
    const bool in = std::any_of(masks.begin(), masks.end(), [&](const StructureMask* m) { return m->bits[i] != 0; });
    if (in) out.push_back(dose.values[i]);
  }
  return out;
}

// Smallest k with k * 100 >= x * n.
inline std::size_t coverage_count(double x, std::size_t n) {
  const double need = x * static_cast<double>(n);
  auto k = static_cast<std::size_t>(std::ceil(need / 100.0));
  while (k > 0 && static_cast<double>(k - 1) * 100.0 >= need) --k;
  while (static_cast<double>(k) * 100.0 < need) ++k;
  return std::clamp<std::size_t>(k, 1, n);
}

inline double percent_of_sorted(const std::vector<double>& desc, double x) {
  if (!(x > 0.0 && x <= 100.0)) throw Error(ErrorKind::Config, "dose-at-percent needs 0 < x <= 100");
  return desc[coverage_count(x, desc.size()) - 1];
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double d : v) s += d;
  return s / static_cast<double>(v.size());
}

}  // namespace detail

/// Cumulative DVH by exact counting. Edges run 0, w, 2w, ... up to the first edge above the max dose.
inline DvhCurve exact_dvh_curve(const Grid3& dose, const StructureMask& mask, double bin_width) {
  if (!(bin_width > 0.0)) throw Error(ErrorKind::Config, "bin width must be positive");
  auto asc = detail::masked_doses(dose, mask);
  std::sort(asc.begin(), asc.end());
  DvhCurve curve{mask.name, {}, {}};
  const double n = static_cast<double>(asc.size());
  for (std::size_t b = 0;; ++b) {
    const double edge = static_cast<double>(b) * bin_width;
    const auto first = std::lower_bound(asc.begin(), asc.end(), edge);
    curve.edges.push_back(edge);
    curve.fractions.push_back(static_cast<double>(asc.end() - first) / n);
    if (first == asc.end()) break;
  }
  return curve;
}

/// Fraction of the structure receiving at least `dose_level`.
inline double volume_fraction_at(const Grid3& dose, const StructureMask& mask, double dose_level) {
  const auto d = detail::masked_doses(dose, mask);
  const auto hit = std::count_if(d.begin(), d.end(), [&](double v) { return v >= dose_level; });
  return static_cast<double>(hit) / static_cast<double>(d.size());
}

/// Largest dose received by at least x% of the structure, at voxel resolution.
inline double dose_at_percent(const Grid3& dose, const StructureMask& mask, double x) {
  return detail::percent_of_sorted(detail::sorted_descending(detail::masked_doses(dose, mask)), x);
}

/// Minimum dose within the hottest `vol_cc` of the structure.
inline double dose_at_cc(const Grid3& dose, const StructureMask& mask, double vol_cc) {
  if (!(vol_cc > 0.0)) throw Error(ErrorKind::Config, "dose-at-cc needs a positive volume");
  const auto desc = detail::sorted_descending(detail::masked_doses(dose, mask));
  const double k_real = std::round(vol_cc / voxel_volume_cc(dose.geometry));
  const std::size_t k = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(1.0, k_real)), 1, desc.size());
  return desc[k - 1];
}

inline double mean_dose(const Grid3& dose, const StructureMask& mask) {
  return detail::mean_of(detail::masked_doses(dose, mask));
}

inline double max_dose(const Grid3& dose, const StructureMask& mask) {
  const auto d = detail::masked_doses(dose, mask);
  return *std::max_element(d.begin(), d.end());
}

/// Mean absolute voxel error over the whole grid.
inline double dose_score(const Grid3& pred, const Grid3& ref) {
  pred.validate();
  ref.validate();
  if (!(pred.geometry == ref.geometry)) throw Error(ErrorKind::InvalidGeometry, "dose grids have different geometry");
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) sum += std::abs(pred.values[i] - ref.values[i]);
  return sum / static_cast<double>(pred.size());
}

// ---------------------------------------------------------------------------
// DVH score

enum class CriterionKind { MeanDose, DoseAtCc, DoseAtPercent };

struct DvhCriterion {
  std::string structure;
  CriterionKind kind = CriterionKind::MeanDose;
  double parameter = 0.0;  // cc for DoseAtCc, percent for DoseAtPercent

  std::string label() const {
    char buf[32];
    switch (kind) {
      case CriterionKind::MeanDose: return "Mean";
      case CriterionKind::DoseAtCc: std::snprintf(buf, sizeof buf, "D%gcc", parameter); return buf;
      case CriterionKind::DoseAtPercent: std::snprintf(buf, sizeof buf, "D%g", parameter); return buf;
    }
    return "?";
  }

  double evaluate(const Grid3& dose, const StructureMask& mask) const {
    switch (kind) {
      case CriterionKind::MeanDose: return mean_dose(dose, mask);
      case CriterionKind::DoseAtCc: return dose_at_cc(dose, mask, parameter);
      case CriterionKind::DoseAtPercent: return dose_at_percent(dose, mask, parameter);
    }
    return 0.0;
  }
};

/// OARs: mean dose and D0.1cc. PTV: D99, D95, D1.
inline std::vector<DvhCriterion> dvh_score_criteria(const std::vector<StructureMask>& structures) {
  std::vector<DvhCriterion> out;
  bool has_ptv = false;
  for (const auto& s : structures) {
    if (s.role == Role::PTV) {
      has_ptv = true;
      for (double x : {99.0, 95.0, 1.0}) out.push_back({s.name, CriterionKind::DoseAtPercent, x});
    } else {
      out.push_back({s.name, CriterionKind::MeanDose, 0.0});
      out.push_back({s.name, CriterionKind::DoseAtCc, 0.1});
    }
  }
  if (!has_ptv) throw Error(ErrorKind::Config, "DVH score needs a PTV");
  return out;
}

struct CriterionError {
  std::string structure;
  std::string criterion;
  double ref = 0.0;
  double pred = 0.0;
  double abs_error = 0.0;
};

struct DvhScore {
  double score = 0.0;
  std::vector<CriterionError> errors;
};

inline DvhScore dvh_score(const Grid3& pred, const Grid3& ref, const std::vector<StructureMask>& structures) {
  DvhScore out;
  double sum = 0.0;
  for (const auto& c : dvh_score_criteria(structures)) {
    const auto& mask = *std::find_if(structures.begin(), structures.end(),
                                     [&](const StructureMask& s) { return s.name == c.structure; });
    CriterionError e{c.structure, c.label(), c.evaluate(ref, mask), c.evaluate(pred, mask), 0.0};
    e.abs_error = std::abs(e.ref - e.pred);
    sum += e.abs_error;
    out.errors.push_back(e);
  }
  out.score = sum / static_cast<double>(out.errors.size());
  return out;
}

// ---------------------------------------------------------------------------
// indices

/// (D2 - D98) / D50 inside the PTV.
inline double homogeneity_index(const Grid3& dose, const StructureMask& ptv) {
  const auto desc = detail::sorted_descending(detail::masked_doses(dose, ptv));
  const double d50 = detail::percent_of_sorted(desc, 50.0);
  if (!(d50 > 0.0)) throw Error(ErrorKind::Numerical, "homogeneity index undefined for D50 = 0");
  return (detail::percent_of_sorted(desc, 2.0) - detail::percent_of_sorted(desc, 98.0)) / d50;
}

/// Paddick conformity index TV_PIV^2 / (TV * PIV); 0 when no voxel reaches the isodose level.
inline double paddick_ci(const Grid3& dose, const StructureMask& ptv, double isodose_level) {
  if (!(ptv.geometry == dose.geometry)) throw Error(ErrorKind::InvalidGeometry, "PTV geometry differs from dose");
  std::size_t tv = 0, piv = 0, tv_piv = 0;
  for (std::size_t i = 0; i < dose.size(); ++i) {
    const bool in_ptv = ptv.bits[i] != 0;
    const bool covered = dose.values[i] >= isodose_level;
    tv += in_ptv;
    piv += covered;
    tv_piv += in_ptv && covered;
  }
  if (tv == 0) throw Error(ErrorKind::EmptyMask, "PTV is empty");
  if (piv == 0) return 0.0;
  const double overlap = static_cast<double>(tv_piv);
  return overlap * overlap / (static_cast<double>(tv) * static_cast<double>(piv));
}

// ---------------------------------------------------------------------------
// clinical criteria

enum class ClinicalKind { Max, Mean, VolumeAtDose, MinDoseAtPercent };

struct ClinicalCriterion {
  std::string label;                    // e.g. "Lungs"
  std::vector<std::string> structures;  // evaluated over the union
  ClinicalKind kind = ClinicalKind::Max;
  double limit = 0.0;       // Gy, or percent for VolumeAtDose
  double dose_level = 0.0;  // Gy for VolumeAtDose, percent for MinDoseAtPercent

  std::string description() const {
    char buf[64];
    switch (kind) {
      case ClinicalKind::Max: std::snprintf(buf, sizeof buf, "Max <= %g Gy", limit); break;
      case ClinicalKind::Mean: std::snprintf(buf, sizeof buf, "Mean <= %g Gy", limit); break;
      case ClinicalKind::VolumeAtDose: std::snprintf(buf, sizeof buf, "V(%gGy) <= %g%%", dose_level, limit); break;
      case ClinicalKind::MinDoseAtPercent: std::snprintf(buf, sizeof buf, "D%g >= %g Gy", dose_level, limit); break;
    }
    return buf;
  }
};

enum class MaxDoseMode { Absolute, D0_1cc };

/// Institutional max/mean and dose-volume limits for conventional lung plans (60 Gy in 30 fx),
/// plus a PTV coverage row (D95 >= 95% of prescription).
inline std::vector<ClinicalCriterion> default_clinical_criteria(double prescription = 60.0) {
  using K = ClinicalKind;
  return {
      {"PTV", {"PTV"}, K::Max, 72.0, 0.0},
      {"PTV", {"PTV"}, K::MinDoseAtPercent, 0.95 * prescription, 95.0},
      {"Lungs", {"Lung_L", "Lung_R"}, K::Max, 66.0, 0.0},
      {"Lungs", {"Lung_L", "Lung_R"}, K::Mean, 21.0, 0.0},
      {"Lungs", {"Lung_L", "Lung_R"}, K::VolumeAtDose, 37.0, 20.0},
      {"Heart", {"Heart"}, K::Max, 66.0, 0.0},
      {"Heart", {"Heart"}, K::Mean, 20.0, 0.0},
      {"Heart", {"Heart"}, K::VolumeAtDose, 50.0, 30.0},
      {"Stomach", {"Stomach"}, K::Max, 54.0, 0.0},
      {"Stomach", {"Stomach"}, K::Mean, 30.0, 0.0},
      {"Esophagus", {"Esophagus"}, K::Max, 66.0, 0.0},
      {"Esophagus", {"Esophagus"}, K::Mean, 34.0, 0.0},
      {"Liver", {"Liver"}, K::Max, 66.0, 0.0},
      {"Liver", {"Liver"}, K::VolumeAtDose, 50.0, 30.0},
      {"Cord", {"Cord"}, K::Max, 50.0, 0.0},
      {"Brachial Plexus", {"BrachialPlexus"}, K::Max, 65.0, 0.0},
  };
}

struct ClinicalRow {
  std::string structure;
  std::string criterion;
  double limit = 0.0;
  double achieved = 0.0;
  bool evaluable = false;
  bool pass = false;
};

inline std::vector<ClinicalRow> clinical_report(const Grid3& dose, const std::vector<StructureMask>& structures,
                                                const std::vector<ClinicalCriterion>& criteria,
                                                MaxDoseMode max_mode = MaxDoseMode::Absolute) {
  std::vector<ClinicalRow> rows;
  for (const auto& c : criteria) {
    if (c.structures.empty()) throw Error(ErrorKind::Config, "clinical criterion '" + c.label + "' names no structure");
    if (c.kind == ClinicalKind::VolumeAtDose && !(c.limit >= 0.0 && c.limit <= 100.0))
      throw Error(ErrorKind::Config, "volume criterion limit must be a percentage");
    if (c.kind == ClinicalKind::MinDoseAtPercent && !(c.dose_level > 0.0 && c.dose_level <= 100.0))
      throw Error(ErrorKind::Config, "coverage criterion needs 0 < percent <= 100");
    ClinicalRow row{c.label, c.description(), c.limit, 0.0, false, false};
    std::vector<const StructureMask*> masks;
    for (const auto& name : c.structures)
      for (const auto& s : structures)
        if (s.name == name && s.geometry == dose.geometry) masks.push_back(&s);
    std::vector<double> d = masks.empty() ? std::vector<double>{} : detail::union_doses(dose, masks);
    if (d.empty()) {
      rows.push_back(row);
      continue;
    }
    row.evaluable = true;
    switch (c.kind) {
      case ClinicalKind::Max:
        if (max_mode == MaxDoseMode::Absolute) {
          row.achieved = *std::max_element(d.begin(), d.end());
        } else {
          const auto desc = detail::sorted_descending(d);
          const double k = std::max(1.0, std::round(0.1 / voxel_volume_cc(dose.geometry)));
          row.achieved = desc[std::min(desc.size(), static_cast<std::size_t>(k)) - 1];
        }
        row.pass = row.achieved <= c.limit;
        break;
      case ClinicalKind::Mean:
        row.achieved = detail::mean_of(d);
        row.pass = row.achieved <= c.limit;
        break;
      case ClinicalKind::VolumeAtDose: {
        const auto hit = std::count_if(d.begin(), d.end(), [&](double v) { return v >= c.dose_level; });
        row.achieved = 100.0 * static_cast<double>(hit) / static_cast<double>(d.size());
        row.pass = row.achieved <= c.limit;
        break;
      }
      case ClinicalKind::MinDoseAtPercent:
        row.achieved = detail::percent_of_sorted(detail::sorted_descending(d), c.dose_level);
        row.pass = row.achieved >= c.limit;
        break;
    }
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// full report

struct MetricsReport {
  std::string case_id;
  double dose_score = 0.0;
  std::vector<CriterionError> criteria;
  double dvh_score = 0.0;
  double hi_ref = 0.0, hi_pred = 0.0, hi_error = 0.0;
  double pci_ref = 0.0, pci_pred = 0.0, pci_error = 0.0;
  std::vector<ClinicalRow> clinical;  // evaluated on the predicted dose
  std::vector<DvhCurve> dvh_ref, dvh_pred;
};

struct ReportOptions {
  double prescription = 60.0;
  double dvh_bin_width = 0.5;
  bool include_curves = true;
  MaxDoseMode max_mode = MaxDoseMode::Absolute;
};

inline MetricsReport evaluate_case(const Grid3& pred, const Grid3& ref, const std::vector<StructureMask>& structures,
                                   const std::string& case_id, const ReportOptions& opt = {}) {
  MetricsReport r;
  r.case_id = case_id;
  r.dose_score = dose_score(pred, ref);
  auto dvh = dvh_score(pred, ref, structures);
  r.criteria = std::move(dvh.errors);
  r.dvh_score = dvh.score;
  const auto& ptv = *std::find_if(structures.begin(), structures.end(),
                                  [](const StructureMask& s) { return s.role == Role::PTV; });
  r.hi_ref = homogeneity_index(ref, ptv);
  try {
    r.hi_pred = homogeneity_index(pred, ptv);
    r.hi_error = std::abs(r.hi_pred - r.hi_ref);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::Numerical) throw;
    r.hi_pred = r.hi_error = std::numeric_limits<double>::quiet_NaN();  // predicted D50 = 0
  }
  r.pci_ref = paddick_ci(ref, ptv, opt.prescription);
  r.pci_pred = paddick_ci(pred, ptv, opt.prescription);
  r.pci_error = std::abs(r.pci_pred - r.pci_ref);
  r.clinical = clinical_report(pred, structures, default_clinical_criteria(opt.prescription), opt.max_mode);
  if (opt.include_curves) {
    for (const auto& s : structures) {
      r.dvh_ref.push_back(exact_dvh_curve(ref, s, opt.dvh_bin_width));
      r.dvh_pred.push_back(exact_dvh_curve(pred, s, opt.dvh_bin_width));
    }
  }
  return r;
}

inline nlohmann::ordered_json to_json(const DvhCurve& c) {
  return {{"structure", c.structure}, {"edges", c.edges}, {"fractions", c.fractions}};
}

inline nlohmann::ordered_json to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["case_id"] = r.case_id;
  j["dose_score"] = r.dose_score;
  j["dvh_score"] = r.dvh_score;
  j["criteria"] = nlohmann::ordered_json::array();
  for (const auto& e : r.criteria)
    j["criteria"].push_back({{"structure", e.structure}, {"criterion", e.criterion}, {"ref", e.ref},
                             {"pred", e.pred}, {"abs_error", e.abs_error}});
  j["hi_ref"] = r.hi_ref;
  j["hi_pred"] = r.hi_pred;
  j["hi_error"] = r.hi_error;
  j["pci_ref"] = r.pci_ref;
  j["pci_pred"] = r.pci_pred;
  j["pci_error"] = r.pci_error;
  j["clinical"] = nlohmann::ordered_json::array();
  for (const auto& c : r.clinical)
    j["clinical"].push_back({{"structure", c.structure}, {"criterion", c.criterion}, {"limit", c.limit},
                             {"achieved", c.achieved}, {"evaluable", c.evaluable}, {"pass", c.pass}});
  j["dvh_ref"] = nlohmann::ordered_json::array();
  j["dvh_pred"] = nlohmann::ordered_json::array();
  for (const auto& c : r.dvh_ref) j["dvh_ref"].push_back(to_json(c));
  for (const auto& c : r.dvh_pred) j["dvh_pred"].push_back(to_json(c));
  return j;
}

inline MetricsReport metrics_report_from_json(const nlohmann::json& j) {
  MetricsReport r;
  try {
    r.case_id = j.at("case_id").get<std::string>();
    r.dose_score = j.at("dose_score").get<double>();
    r.dvh_score = j.at("dvh_score").get<double>();
    for (const auto& e : j.at("criteria"))
      r.criteria.push_back({e.at("structure").get<std::string>(), e.at("criterion").get<std::string>(),
                            e.at("ref").get<double>(), e.at("pred").get<double>(), e.at("abs_error").get<double>()});
    auto number = [](const nlohmann::json& v) {
      return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
    };
    r.hi_ref = j.at("hi_ref").get<double>();
    r.hi_pred = number(j.at("hi_pred"));
    r.hi_error = number(j.at("hi_error"));
    r.pci_ref = j.at("pci_ref").get<double>();
    r.pci_pred = j.at("pci_pred").get<double>();
    r.pci_error = j.at("pci_error").get<double>();
    if (j.contains("clinical"))
      for (const auto& c : j.at("clinical"))
        r.clinical.push_back({c.at("structure").get<std::string>(), c.at("criterion").get<std::string>(),
                              c.at("limit").get<double>(), c.at("achieved").get<double>(), c.at("evaluable").get<bool>(),
                              c.at("pass").get<bool>()});
    auto curves = [](const nlohmann::json& arr) {
      std::vector<DvhCurve> out;
      for (const auto& c : arr)
        out.push_back({c.at("structure").get<std::string>(), c.at("edges").get<std::vector<double>>(),
                       c.at("fractions").get<std::vector<double>>()});
      return out;
    };
    if (j.contains("dvh_ref")) r.dvh_ref = curves(j.at("dvh_ref"));
    if (j.contains("dvh_pred")) r.dvh_pred = curves(j.at("dvh_pred"));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Io, std::string("malformed metrics report: ") + e.what());
  }
  return r;
}

}  // namespace dosekit
