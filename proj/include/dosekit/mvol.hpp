#pragma once

// MVOL volume files and case directories.
//
// Layout: the line "MVOL1", one JSON header line
//   {"dims":[nx,ny,nz],"spacing":[sx,sy,sz],"origin":[ox,oy,oz],"unit":"Gy","dtype":"f32le"}
// and then nx*ny*nz samples, x-fastest. Dose/CT use f32le, masks use u8 (0/1).
// A case directory holds ct.mvol, dose.mvol, masks/<name>.mvol and case.json.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "json.hpp"

#include "dosekit/error.hpp"
#include "dosekit/volume.hpp"

namespace dosekit {

namespace fs = std::filesystem;

inline constexpr std::string_view kMvolMagic = "MVOL1";

namespace detail {

inline std::string mvol_header(const GridGeometry& g, Unit unit, std::string_view dtype) {
  nlohmann::ordered_json h;
  h["dims"] = {g.dims[0], g.dims[1], g.dims[2]};
  h["spacing"] = {g.spacing[0], g.spacing[1], g.spacing[2]};
  h["origin"] = {g.origin[0], g.origin[1], g.origin[2]};
  h["unit"] = std::string(unit_name(unit));
  h["dtype"] = std::string(dtype);
  return std::string(kMvolMagic) + "\n" + h.dump() + "\n";
}

struct MvolHeader {
  GridGeometry geometry;
  Unit unit = Unit::Unitless;
  std::string dtype;
};

inline MvolHeader read_mvol_header(std::istream& in) {
  std::string magic, json_line;
  if (!std::getline(in, magic) || magic != kMvolMagic) throw Error(ErrorKind::Io, "missing MVOL1 magic");
  if (!std::getline(in, json_line)) throw Error(ErrorKind::Io, "missing MVOL header");
  MvolHeader out;
  try {
    const auto h = nlohmann::json::parse(json_line);
    for (int a = 0; a < 3; ++a) {
      out.geometry.dims[a] = h.at("dims").at(a).get<int>();
      out.geometry.spacing[a] = h.at("spacing").at(a).get<double>();
      out.geometry.origin[a] = h.at("origin").at(a).get<double>();
    }
    out.unit = parse_unit(h.at("unit").get<std::string>());
    out.dtype = h.at("dtype").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Io, std::string("malformed MVOL header: ") + e.what());
  }
  out.geometry.validate();
  return out;
}

inline void put_f32le(std::ostream& out, float v) {
  const auto bits = std::bit_cast<std::uint32_t>(v);
  const char bytes[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                         static_cast<char>((bits >> 16) & 0xff), static_cast<char>((bits >> 24) & 0xff)};
  out.write(bytes, 4);
}

inline float get_f32le(const unsigned char* p) {
  const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                             (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  return std::bit_cast<float>(bits);
}

inline std::string read_payload(std::istream& in, std::size_t bytes) {
  std::string buf(bytes, '\0');
  in.read(buf.data(), static_cast<std::streamsize>(bytes));
  if (static_cast<std::size_t>(in.gcount()) != bytes) throw Error(ErrorKind::Io, "truncated MVOL payload");
  return buf;
}

}  // namespace detail

inline void write_mvol(std::ostream& out, const Grid3& grid) {
  grid.validate();
  out << detail::mvol_header(grid.geometry, grid.unit, "f32le");
  for (double v : grid.values) detail::put_f32le(out, static_cast<float>(v));
}

inline void write_mvol(std::ostream& out, const StructureMask& mask) {
  out << detail::mvol_header(mask.geometry, Unit::Unitless, "u8");
  for (auto b : mask.bits) out.put(b ? '\1' : '\0');
}

inline Grid3 read_mvol_grid(std::istream& in) {
  const auto h = detail::read_mvol_header(in);
  Grid3 g(h.geometry, h.unit);
  const std::size_t n = h.geometry.voxel_count();
  if (h.dtype == "f32le") {
    const std::string buf = detail::read_payload(in, 4 * n);
    const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
    for (std::size_t i = 0; i < n; ++i) g.values[i] = detail::get_f32le(p + 4 * i);
  } else if (h.dtype == "u8") {
    const std::string buf = detail::read_payload(in, n);
    for (std::size_t i = 0; i < n; ++i) g.values[i] = static_cast<unsigned char>(buf[i]);
  } else {
    throw Error(ErrorKind::Io, "unsupported MVOL dtype '" + h.dtype + "'");
  }
  return g;
}

inline StructureMask read_mvol_mask(std::istream& in, std::string name = {}, Role role = Role::OAR) {
  const auto h = detail::read_mvol_header(in);
  if (h.dtype != "u8") throw Error(ErrorKind::Io, "mask MVOL must have dtype u8");
  StructureMask m(h.geometry, std::move(name), role);
  const std::string buf = detail::read_payload(in, h.geometry.voxel_count());
  for (std::size_t i = 0; i < buf.size(); ++i) {
    const auto b = static_cast<unsigned char>(buf[i]);
    if (b > 1) throw Error(ErrorKind::Io, "mask MVOL value other than 0/1");
    m.bits[i] = b;
  }
  return m;
}

template <typename T>
void save_mvol(const fs::path& path, const T& volume) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  write_mvol(out, volume);
  if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

inline Grid3 load_mvol_grid(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  return read_mvol_grid(in);
}

inline StructureMask load_mvol_mask(const fs::path& path, std::string name = {}, Role role = Role::OAR) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  return read_mvol_mask(in, std::move(name), role);
}

inline void save_case(const fs::path& dir, const CaseBundle& bundle) {
  fs::create_directories(dir / "masks");
  save_mvol(dir / "ct.mvol", bundle.ct);
  save_mvol(dir / "dose.mvol", bundle.dose);
  nlohmann::ordered_json meta;
  meta["case_id"] = bundle.case_id;
  meta["structures"] = nlohmann::ordered_json::array();
  for (const auto& s : bundle.structures) {
    save_mvol(dir / "masks" / (s.name + ".mvol"), s);
    meta["structures"].push_back({{"name", s.name}, {"role", std::string(role_name(s.role))}});
  }
  std::ofstream out(dir / "case.json");
  if (!out) throw Error(ErrorKind::Io, "cannot write case.json in " + dir.string());
  out << meta.dump(2) << "\n";
}

inline CaseBundle load_case(const fs::path& dir) {
  std::ifstream in(dir / "case.json");
  if (!in) throw Error(ErrorKind::Io, "missing case.json in " + dir.string());
  nlohmann::json meta;
  try {
    in >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Io, std::string("malformed case.json: ") + e.what());
  }
  CaseBundle bundle;
  bundle.case_id = meta.value("case_id", dir.filename().string());
  bundle.ct = load_mvol_grid(dir / "ct.mvol");
  bundle.dose = load_mvol_grid(dir / "dose.mvol");
  for (const auto& s : meta.at("structures")) {
    const auto name = s.at("name").get<std::string>();
    bundle.structures.push_back(
        load_mvol_mask(dir / "masks" / (name + ".mvol"), name, parse_role(s.at("role").get<std::string>())));
  }
  return bundle;
}

}  // namespace dosekit
