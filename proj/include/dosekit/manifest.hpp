#pragma once

#include <sys/utsname.h>

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "dosekit/error.hpp"

#ifndef DOSEKIT_VERSION
#define DOSEKIT_VERSION "dev"
#endif

namespace dosekit {

inline std::uint64_t fnv1a_bytes(const char* data, std::size_t n, std::uint64_t h = 1469598103934665603ULL) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// FNV-1a of a file, or of every regular file below a directory (sorted by relative path).
inline std::string content_hash(const std::filesystem::path& path, const std::vector<std::string>& skip = {}) {
  namespace fs = std::filesystem;
  auto hash_file = [](const fs::path& p, std::uint64_t h) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw Error(ErrorKind::Io, "cannot read " + p.string());
    std::vector<char> buf(1 << 16);
    while (in) {
      in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
      h = fnv1a_bytes(buf.data(), static_cast<std::size_t>(in.gcount()), h);
    }
    return h;
  };
  if (!fs::exists(path)) throw Error(ErrorKind::Io, "missing output " + path.string());
  if (!fs::is_directory(path)) return hex64(hash_file(path, 1469598103934665603ULL));

  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(path))
    if (e.is_regular_file()) {
      const auto rel = fs::relative(e.path(), path);
      if (std::find(skip.begin(), skip.end(), rel.generic_string()) == skip.end()) files.push_back(rel);
    }
  std::sort(files.begin(), files.end());
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& rel : files) {
    const std::string name = rel.generic_string();
    h = fnv1a_bytes(name.data(), name.size() + 1, h);
    h = hash_file(path / rel, h);
  }
  return hex64(h);
}

inline std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline std::string platform_string() {
  std::string s;
  utsname u{};
  if (uname(&u) == 0) s = std::string(u.sysname) + " " + u.release + " " + u.machine;
#if defined(__clang__)
  s += "; clang " __clang_version__;
#elif defined(__GNUC__)
  s += "; gcc " __VERSION__;
#endif
  return s;
}

struct OutputRecord {
  std::string path;  // as given on the command line
  std::string hash;
};

/// Provenance of one artifact-producing command.
struct RunManifest {
  std::string command;
  std::vector<std::string> argv;  // arguments after the program name
  std::string cwd;
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
  std::map<std::string, std::uint64_t> seeds;
  std::map<std::string, std::string> env;
  std::string version = DOSEKIT_VERSION;
  std::string platform = platform_string();
  std::string started;
  std::string finished;
  std::vector<OutputRecord> outputs;
  nlohmann::ordered_json timing = nlohmann::ordered_json::object();
};

inline constexpr const char* kRunManifestName = "run_manifest.json";

inline nlohmann::ordered_json to_json(const RunManifest& m) {
  nlohmann::ordered_json j;
  j["command"] = m.command;
  j["argv"] = m.argv;
  j["cwd"] = m.cwd;
  j["config"] = m.config;
  j["seeds"] = m.seeds;
  j["env"] = m.env;
  j["version"] = m.version;
  j["platform"] = m.platform;
  j["started"] = m.started;
  j["finished"] = m.finished;
  j["outputs"] = nlohmann::ordered_json::array();
  for (const auto& o : m.outputs) j["outputs"].push_back({{"path", o.path}, {"hash", o.hash}});
  j["timing"] = m.timing;
  return j;
}

inline RunManifest run_manifest_from_json(const nlohmann::json& j) {
  RunManifest m;
  try {
    m.command = j.at("command").get<std::string>();
    m.argv = j.at("argv").get<std::vector<std::string>>();
    m.cwd = j.at("cwd").get<std::string>();
    m.config = j.at("config");
    m.seeds = j.at("seeds").get<std::map<std::string, std::uint64_t>>();
    m.env = j.value("env", std::map<std::string, std::string>{});
    m.version = j.at("version").get<std::string>();
    m.platform = j.at("platform").get<std::string>();
    m.started = j.value("started", "");
    m.finished = j.value("finished", "");
    for (const auto& o : j.at("outputs")) m.outputs.push_back({o.at("path").get<std::string>(), o.at("hash").get<std::string>()});
    if (j.contains("timing")) m.timing = j.at("timing");
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Io, std::string("malformed run manifest: ") + e.what());
  }
  return m;
}

inline void save_run_manifest(const std::filesystem::path& path, const RunManifest& m) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out << to_json(m).dump(2) << "\n";
}

inline RunManifest load_run_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Io, path.string() + ": " + e.what());
  }
  return run_manifest_from_json(j);
}

/// Where a command writing `out` keeps its manifest: inside a directory output, next to a file output.
inline std::filesystem::path manifest_path_for(const std::filesystem::path& out) {
  if (std::filesystem::is_directory(out)) return out / kRunManifestName;
  return std::filesystem::path(out.string() + ".manifest.json");
}

}  // namespace dosekit
