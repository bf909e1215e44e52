#pragma once

#include <algorithm>
#include <numeric>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "dosekit/error.hpp"
#include "dosekit/volume.hpp"

namespace dosekit {

/// OAR channel order used by the one-hot stack and the network input.
inline const std::vector<std::string>& canonical_oars() {
  static const std::vector<std::string> names{"Esophagus", "Cord", "Heart", "Lung_L", "Lung_R"};
  return names;
}

struct PreprocessConfig {
  double hu_low = -1024.0;
  double hu_high = 3071.0;
  Index3 crop_size{300, 300, 128};
  Index3 net_dims{128, 128, 128};
  double prescription = 60.0;  // Gy

  void validate() const {
    if (!(hu_low < hu_high)) throw Error(ErrorKind::Config, "hu_clip low must be below high");
    for (int a = 0; a < 3; ++a)
      if (crop_size[a] < 1 || net_dims[a] < 1) throw Error(ErrorKind::Config, "crop_size and net_dims must be positive");
    if (!(prescription > 0.0)) throw Error(ErrorKind::Config, "prescription must be positive");
  }
};

/// Clip to [hu_low, hu_high] and map linearly onto [0, 1].
inline Grid3 clip_rescale_ct(const Grid3& ct, const PreprocessConfig& cfg = {}) {
  if (ct.unit != Unit::HU) throw Error(ErrorKind::Unit, "CT must be in HU");
  cfg.validate();
  Grid3 out(ct.geometry, Unit::Unitless);
  const double range = cfg.hu_high - cfg.hu_low;
  for (std::size_t i = 0; i < ct.values.size(); ++i)
    out.values[i] = (std::clamp(ct.values[i], cfg.hu_low, cfg.hu_high) - cfg.hu_low) / range;
  return out;
}

struct ChannelStack {
  GridGeometry geometry;
  std::vector<std::string> names;
  std::vector<std::vector<std::uint8_t>> channels;
};

/// One channel per canonical OAR name, then the PTV channel. Missing structures give all-zero
/// channels; channels are independent, so overlapping structures are both set.
inline ChannelStack one_hot_structures(const std::vector<StructureMask>& structures,
                                       const std::vector<std::string>& oar_order = canonical_oars()) {
  if (structures.empty()) throw Error(ErrorKind::Config, "no structures to encode");
  std::set<std::string> seen;
  for (const auto& s : structures) {
    if (!seen.insert(s.name).second) throw Error(ErrorKind::Config, "duplicate structure name '" + s.name + "'");
    if (!(s.geometry == structures.front().geometry))
      throw Error(ErrorKind::InvalidGeometry, "structure '" + s.name + "' has a different geometry");
  }
  if (std::set<std::string>(oar_order.begin(), oar_order.end()).size() != oar_order.size())
    throw Error(ErrorKind::Config, "duplicate name in channel order");

  ChannelStack out;
  out.geometry = structures.front().geometry;
  const std::size_t n = out.geometry.voxel_count();
  for (const auto& name : oar_order) {
    out.names.push_back(name);
    auto it = std::find_if(structures.begin(), structures.end(),
                           [&](const StructureMask& s) { return s.name == name && s.role == Role::OAR; });
    out.channels.push_back(it != structures.end() ? it->bits : std::vector<std::uint8_t>(n, 0));
  }
  auto ptv = std::find_if(structures.begin(), structures.end(), [](const StructureMask& s) { return s.role == Role::PTV; });
  out.names.push_back(ptv != structures.end() ? ptv->name : "PTV");
  out.channels.push_back(ptv != structures.end() ? ptv->bits : std::vector<std::uint8_t>(n, 0));
  return out;
}

inline double masked_mean(const Grid3& grid, const StructureMask& mask) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < mask.bits.size(); ++i) {
    if (!mask.bits[i]) continue;
    sum += grid.values[i];
    ++n;
  }
  if (n == 0) throw Error(ErrorKind::EmptyMask, "structure '" + mask.name + "' is empty");
  return sum / static_cast<double>(n);
}

struct NormalizedDose {
  Grid3 dose;
  double scale = 1.0;
};

/// Scales the whole grid so the PTV mean equals the prescription.
inline NormalizedDose normalize_ptv_mean(const Grid3& dose, const StructureMask& ptv, double prescription) {
  if (!(ptv.geometry == dose.geometry)) throw Error(ErrorKind::InvalidGeometry, "PTV geometry differs from dose");
  if (ptv.empty()) throw Error(ErrorKind::Normalization, "PTV is empty");
  const double mean = masked_mean(dose, ptv);
  if (!(mean > 0.0)) throw Error(ErrorKind::Normalization, "PTV mean dose is not positive");
  NormalizedDose out{dose, prescription / mean};
  if (out.scale == 1.0) return out;
  for (double& v : out.dose.values) v *= out.scale;
  return out;
}

/// Crop window origin along each axis: centred on `box`, shifted inward at the volume border.
inline Index3 centered_window(const IndexBox& box, Index3 window, Index3 dims) {
  Index3 lower{};
  for (int a = 0; a < 3; ++a) {
    const int centre2 = box.lower[a] + box.upper[a];  // twice the centre
    lower[a] = std::clamp((centre2 - window[a]) / 2, 0, dims[a] - window[a]);
  }
  return lower;
}

/// Resample dose to the CT grid, crop a mask-guided window, resample everything to
/// `net_dims`, then normalise the PTV mean dose. A crop size larger than the volume is
/// reduced to the volume size along that axis.
inline CaseBundle prepare_case(const CaseBundle& raw, const PreprocessConfig& cfg) {
  cfg.validate();
  raw.ct.validate();
  if (raw.structures.empty()) throw Error(ErrorKind::Config, "case has no structures");
  const GridGeometry& ct_geom = raw.ct.geometry;
  for (const auto& s : raw.structures)
    if (!(s.geometry == ct_geom)) throw Error(ErrorKind::InvalidGeometry, "mask '" + s.name + "' differs from CT geometry");
  (void)raw.ptv();

  const Grid3 dose_on_ct = trilinear_resample(raw.dose, ct_geom);

  Index3 window{};
  for (int a = 0; a < 3; ++a) window[a] = std::min(cfg.crop_size[a], ct_geom.dims[a]);

  IndexBox uni{{ct_geom.dims[0], ct_geom.dims[1], ct_geom.dims[2]}, {0, 0, 0}};
  for (const auto& s : raw.structures) {
    const IndexBox b = bounding_box(s);
    if (b.empty()) continue;
    for (int a = 0; a < 3; ++a) {
      if (b.upper[a] - b.lower[a] > window[a])
        throw Error(ErrorKind::CropInfeasible, "structure '" + s.name + "' does not fit in the crop window");
      uni.lower[a] = std::min(uni.lower[a], b.lower[a]);
      uni.upper[a] = std::max(uni.upper[a], b.upper[a]);
    }
  }
  if (uni.empty()) throw Error(ErrorKind::EmptyMask, "all structures are empty");
  for (int a = 0; a < 3; ++a) {
    if (uni.upper[a] - uni.lower[a] <= window[a]) continue;
    std::string offenders;
    for (const auto& s : raw.structures) {
      const IndexBox b = bounding_box(s);
      if (!b.empty() && (b.lower[a] == uni.lower[a] || b.upper[a] == uni.upper[a]))
        offenders += (offenders.empty() ? "" : ", ") + s.name;
    }
    throw Error(ErrorKind::CropInfeasible, "structures span more than the crop window along axis " +
                                               std::to_string(a) + ": " + offenders);
  }

  const Index3 lower = centered_window(uni, window, ct_geom.dims);
  const Grid3 ct_crop = crop_region(raw.ct, lower, window);
  const GridGeometry net = same_extent(ct_crop.geometry, cfg.net_dims);

  CaseBundle out;
  out.case_id = raw.case_id;
  out.ct = trilinear_resample(ct_crop, net);
  const Grid3 dose_net = trilinear_resample(crop_region(dose_on_ct, lower, window), net);
  for (const auto& s : raw.structures) out.structures.push_back(resample_mask(crop_region(s, lower, window), net));
  out.dose = normalize_ptv_mean(dose_net, out.ptv(), cfg.prescription).dose;
  for (double v : out.dose.values)
    if (v < 0.0) throw Error(ErrorKind::NegativeDose, "negative dose after preprocessing");
  return out;
}

}  // namespace dosekit
