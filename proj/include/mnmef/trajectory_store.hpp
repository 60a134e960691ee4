#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "mnmef/checkpoint.hpp"
#include "mnmef/dynamics.hpp"
#include "mnmef/error.hpp"

namespace mnmef {

inline constexpr char kTrajectoryMagic[8] = {'M', 'N', 'M', 'E', 'F', 'T', 'R', 'J'};
inline constexpr std::uint64_t kTrajectoryVersion = 1;

/// Contents of the manifest that sits next to the trajectory records.
struct StoreManifest {
  std::string system;
  std::size_t count = 0;
  std::size_t steps = 0;
  std::size_t state_dim = 0;
  std::size_t obs_dim = 0;
  double dt = 0.0;
  std::uint64_t seed = 0;
  std::map<std::string, double> params;
  std::map<std::string, std::string> extra;  // burn-in, mode, ...
};

inline std::filesystem::path manifest_path(const std::filesystem::path& dir) { return dir / "manifest.txt"; }

inline std::filesystem::path record_path(const std::filesystem::path& dir, std::size_t index) {
  char name[32];
  std::snprintf(name, sizeof name, "traj_%06zu.bin", index);
  return dir / name;
}

inline void write_trajectory(const std::filesystem::path& path, const TruthRun& run, double dt) {
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), ErrorKind::kData, "cannot write " + path.string());
  os.write(kTrajectoryMagic, 8);
  binio::write_u64(os, kTrajectoryVersion);
  binio::write_u64(os, run.states.cols());
  binio::write_u64(os, run.observations.cols());
  binio::write_u64(os, run.length());
  binio::write_f64(os, dt);
  binio::write_u64(os, run.seed);
  binio::write_f64s(os, run.states.data());
  binio::write_f64s(os, run.observations.data());
  require(static_cast<bool>(os), ErrorKind::kData, "failed writing " + path.string());
}

inline TruthRun read_trajectory(const std::filesystem::path& path, std::uint64_t stream = 0, double* dt = nullptr) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorKind::kData, "cannot open " + path.string());
  char magic[8];
  is.read(magic, 8);
  require(static_cast<bool>(is) && std::memcmp(magic, kTrajectoryMagic, 8) == 0, ErrorKind::kData,
          "not a trajectory record: " + path.string());
  require(binio::read_u64(is) == kTrajectoryVersion, ErrorKind::kData, "unsupported trajectory version");
  const std::uint64_t dv = binio::read_u64(is), dy = binio::read_u64(is), steps = binio::read_u64(is);
  require(dv > 0 && dy > 0 && steps > 0 && dv < (1u << 20) && dy < (1u << 20) && steps < (1u << 26),
          ErrorKind::kData, "implausible trajectory header in " + path.string());
  const double step_dt = binio::read_f64(is);
  if (dt) *dt = step_dt;
  TruthRun run;
  run.seed = binio::read_u64(is);
  run.stream = stream;
  run.states = Matrix(steps + 1, dv, binio::read_f64s(is, (steps + 1) * dv));
  run.observations = Matrix(steps, dy, binio::read_f64s(is, steps * dy));
  is.peek();
  require(is.eof(), ErrorKind::kData, "trailing bytes in " + path.string());
  require(all_finite(run.states) && all_finite(run.observations), ErrorKind::kData,
          "non-finite values in " + path.string());
  return run;
}

/// Writes one record per trajectory plus the manifest; existing records in
/// `dir` with the same names are replaced.
inline void save_store(const std::filesystem::path& dir, const SystemSpec& spec, const std::vector<TruthRun>& runs,
                       std::uint64_t seed, const std::map<std::string, std::string>& extra = {}) {
  require(!runs.empty(), ErrorKind::kPrecondition, "no trajectories to store");
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < runs.size(); ++i) write_trajectory(record_path(dir, i), runs[i], spec.dt);
  std::ofstream os(manifest_path(dir));
  require(static_cast<bool>(os), ErrorKind::kData, "cannot write manifest in " + dir.string());
  os.precision(17);
  os << "system = " << spec.name << "\n"
     << "count = " << runs.size() << "\n"
     << "steps = " << runs.front().length() << "\n"
     << "state_dim = " << spec.state_dim << "\n"
     << "obs_dim = " << spec.obs_dim << "\n"
     << "dt = " << spec.dt << "\n"
     << "seed = " << seed << "\n";
  for (const auto& [k, v] : spec.params) os << "param." << k << " = " << v << "\n";
  for (const auto& [k, v] : extra) os << k << " = " << v << "\n";
}

inline StoreManifest read_manifest(const std::filesystem::path& dir) {
  std::ifstream is(manifest_path(dir));
  require(static_cast<bool>(is), ErrorKind::kData, "missing manifest in " + dir.string());
  std::map<std::string, std::string> kv;
  try {
    kv = binio::read_key_values(is);
  } catch (const Error& e) {
    fail(ErrorKind::kData, std::string("malformed manifest: ") + e.what());
  }
  auto get = [&](const std::string& k) {
    const auto it = kv.find(k);
    require(it != kv.end(), ErrorKind::kData, "manifest lacks '" + k + "'");
    return it->second;
  };
  StoreManifest m;
  try {
    m.system = get("system");
    m.count = std::stoul(get("count"));
    m.steps = std::stoul(get("steps"));
    m.state_dim = std::stoul(get("state_dim"));
    m.obs_dim = std::stoul(get("obs_dim"));
    m.dt = std::stod(get("dt"));
    m.seed = std::stoull(get("seed"));
    for (const auto& [k, v] : kv) {
      if (k.rfind("param.", 0) == 0)
        m.params[k.substr(6)] = std::stod(v);
      else if (!(k == "system" || k == "count" || k == "steps" || k == "state_dim" || k == "obs_dim" ||
                 k == "dt" || k == "seed"))
        m.extra[k] = v;
    }
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    fail(ErrorKind::kData, std::string("malformed manifest: ") + e.what());
  }
  return m;
}

/// Rebuilds the system a store was generated from, including its noise levels
/// and observation layout.
inline SystemSpec system_from_manifest(const StoreManifest& m) {
  auto param = [&](const std::string& k, double fallback) {
    const auto it = m.params.find(k);
    return it == m.params.end() ? fallback : it->second;
  };
  const NoiseLevels noise{param("sigma_y", 1.0), param("sigma_v", 0.0)};
  const auto stride = [&](double fallback) { return static_cast<std::size_t>(param("obs_stride", fallback)); };
  const auto offset = static_cast<std::size_t>(param("obs_offset", 0.0));
  SystemKind kind{};
  try {
    kind = parse_system(m.system);
  } catch (const Error&) {
    fail(ErrorKind::kData, "manifest names an unknown system '" + m.system + "'");
  }
  SystemSpec spec;
  switch (kind) {
    case SystemKind::kLorenz63:
      spec = lorenz63_system(noise, param("sigma", 10.0), param("rho", 28.0), param("beta", 8.0 / 3.0));
      break;
    case SystemKind::kLorenz96:
      spec = lorenz96_system(noise, static_cast<std::size_t>(param("dim", 40.0)), param("F", 8.0), stride(4.0), offset);
      break;
    case SystemKind::kKs: {
      KsConfig cfg;
      cfg.length = param("L", cfg.length);
      cfg.grid = static_cast<std::size_t>(param("grid", static_cast<double>(cfg.grid)));
      cfg.dt = param("dt", cfg.dt);
      cfg.substeps = static_cast<std::size_t>(param("substeps", static_cast<double>(cfg.substeps)));
      spec = ks_system(noise, cfg, stride(8.0), offset);
      break;
    }
    case SystemKind::kLinear: {
      std::vector<double> angles;
      for (std::size_t b = 0; m.params.count("angle" + std::to_string(b)); ++b)
        angles.push_back(m.params.at("angle" + std::to_string(b)));
      spec = angles.empty() ? linear_system(noise) : linear_system(noise, angles);
      break;
    }
  }
  require(spec.state_dim == m.state_dim && spec.obs_dim == m.obs_dim, ErrorKind::kData,
          "manifest dimensions do not match the rebuilt system");
  return spec;
}

/// Loads every record listed by the manifest and checks it against `spec`
/// when one is given.
inline std::vector<TruthRun> load_store(const std::filesystem::path& dir, StoreManifest* manifest = nullptr,
                                        const SystemSpec* spec = nullptr) {
  const StoreManifest m = read_manifest(dir);
  if (spec) {
    require(m.system == spec->name, ErrorKind::kData,
            "store holds '" + m.system + "' trajectories, expected '" + spec->name + "'");
    require(m.state_dim == spec->state_dim && m.obs_dim == spec->obs_dim, ErrorKind::kData,
            "store dimensions do not match the system");
  }
  std::vector<TruthRun> runs;
  runs.reserve(m.count);
  for (std::size_t i = 0; i < m.count; ++i) {
    TruthRun r = read_trajectory(record_path(dir, i), i);
    require(r.states.cols() == m.state_dim && r.observations.cols() == m.obs_dim && r.length() == m.steps,
            ErrorKind::kData, "record " + record_path(dir, i).string() + " disagrees with the manifest");
    runs.push_back(std::move(r));
  }
  if (manifest) *manifest = m;
  return runs;
}

}  // namespace mnmef
