#pragma once

#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mnmef/dynamics.hpp"
#include "mnmef/error.hpp"
#include "mnmef/mnmef.hpp"

namespace mnmef {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace binio {

/// Shortest decimal text that parses back to exactly `v`; "nan", "inf", "-inf" otherwise.
inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
inline void write_f64(std::ostream& os, double v) { os.write(reinterpret_cast<const char*>(&v), 8); }
inline void write_str(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline void write_f64s(std::ostream& os, const Vector& v) {
  os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * 8));
}

inline std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  require(static_cast<bool>(is), ErrorKind::kData, "unexpected end of file");
  return v;
}
inline double read_f64(std::istream& is) {
  double v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  require(static_cast<bool>(is), ErrorKind::kData, "unexpected end of file");
  return v;
}
inline std::string read_str(std::istream& is, std::size_t max_len = 1 << 16) {
  const std::uint64_t n = read_u64(is);
  require(n <= max_len, ErrorKind::kData, "string field too long");
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  require(static_cast<bool>(is), ErrorKind::kData, "unexpected end of file");
  return s;
}
inline Vector read_f64s(std::istream& is, std::size_t n) {
  Vector v(n);
  is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * 8));
  require(static_cast<bool>(is), ErrorKind::kData, "unexpected end of file");
  return v;
}

/// Flat `key = value` text with '#' comments.
inline std::map<std::string, std::string> read_key_values(std::istream& is) {
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(is, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto eq = line.find('=');
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    if (trim(line).empty()) continue;
    require(eq != std::string::npos, ErrorKind::kConfig, "expected 'key = value', got '" + trim(line) + "'");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

}  // namespace binio

inline constexpr char kCheckpointMagic[8] = {'M', 'N', 'M', 'E', 'F', 'C', 'K', 'P'};
inline constexpr std::uint64_t kCheckpointVersion = 1;

inline std::filesystem::path sidecar_path(const std::filesystem::path& ckpt) {
  return std::filesystem::path(ckpt.string() + ".txt");
}

/// Extra settings recorded next to the weights. Only the model fields are
/// needed to rebuild the network; the rest documents how it was trained.
struct CheckpointMeta {
  std::size_t detach_horizon = 5;
  std::map<std::string, std::string> extra;
};

inline bool is_standard_sidecar_key(const std::string& k) {
  static const char* const keys[] = {"system", "activation", "bounded_layer", "clamp", "detach_horizon",
                                     "width", "heads", "seed_len", "st_dim", "head_hidden", "ln_eps",
                                     "init_seed", "zero_init_heads"};
  for (const char* s : keys)
    if (k == s) return true;
  return false;
}

/// Binary weights plus a text sidecar describing the architecture.
inline void save_checkpoint(const std::filesystem::path& path, const MnmefModel& m, const CheckpointMeta& meta = {}) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  {
    std::ofstream os(path, std::ios::binary);
    require(static_cast<bool>(os), ErrorKind::kData, "cannot write checkpoint " + path.string());
    os.write(kCheckpointMagic, 8);
    binio::write_u64(os, kCheckpointVersion);
    binio::write_str(os, m.system);
    binio::write_u64(os, m.state_dim);
    binio::write_u64(os, m.obs_dim);
    binio::write_u64(os, m.config.st_dim);
    for (std::size_t p = 0; p < kPartitionCount; ++p)
      binio::write_u64(os, m.params.partition_size(static_cast<Partition>(p)));
    for (std::size_t p = 0; p < kPartitionCount; ++p) binio::write_f64s(os, m.params.flatten(static_cast<Partition>(p)));
    require(static_cast<bool>(os), ErrorKind::kData, "failed writing checkpoint " + path.string());
  }
  std::ofstream sc(sidecar_path(path));
  require(static_cast<bool>(sc), ErrorKind::kData, "cannot write checkpoint sidecar");
  sc << "system = " << m.system << "\n"
     << "activation = " << activation_name(m.config.activation) << "\n"
     << "bounded_layer = " << loc_output_name(m.config.loc_output) << "\n"
     << "clamp = " << binio::format_number(m.clamp) << "\n"
     << "detach_horizon = " << meta.detach_horizon << "\n"
     << "width = " << m.config.width << "\n"
     << "heads = " << m.config.heads << "\n"
     << "seed_len = " << m.config.seed_len << "\n"
     << "st_dim = " << m.config.st_dim << "\n"
     << "head_hidden = " << m.config.head_hidden << "\n"
     << "ln_eps = " << binio::format_number(m.config.ln_eps) << "\n"
     << "init_seed = " << m.config.init_seed << "\n"
     << "zero_init_heads = " << (m.config.zero_init_heads ? 1 : 0) << "\n";
  for (const auto& [k, v] : meta.extra)
    if (!is_standard_sidecar_key(k)) sc << k << " = " << v << "\n";
}

struct LoadedCheckpoint {
  MnmefModel model;
  CheckpointMeta meta;
};

/// Rebuilds the network for `spec` from the sidecar and fills its weights.
inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const SystemSpec& spec) {
  std::ifstream sc(sidecar_path(path));
  require(static_cast<bool>(sc), ErrorKind::kData, "missing checkpoint sidecar " + sidecar_path(path).string());
  auto kv = binio::read_key_values(sc);
  auto get = [&](const std::string& k) {
    auto it = kv.find(k);
    require(it != kv.end(), ErrorKind::kData, "checkpoint sidecar lacks '" + k + "'");
    return it->second;
  };
  ModelConfig cfg;
  std::size_t horizon = 0;
  double clamp = 0.0;
  try {
    clamp = std::stod(get("clamp"));
    horizon = std::stoul(get("detach_horizon"));
    cfg.activation = parse_activation(get("activation"));
    cfg.loc_output = parse_loc_output(get("bounded_layer"));
    cfg.width = std::stoul(get("width"));
    cfg.heads = std::stoul(get("heads"));
    cfg.seed_len = std::stoul(get("seed_len"));
    cfg.st_dim = std::stoul(get("st_dim"));
    cfg.head_hidden = std::stoul(get("head_hidden"));
    cfg.ln_eps = std::stod(get("ln_eps"));
    cfg.init_seed = std::stoull(get("init_seed"));
    cfg.zero_init_heads = get("zero_init_heads") == "1";
  } catch (const std::exception& e) {
    fail(ErrorKind::kData, std::string("malformed checkpoint sidecar: ") + e.what());
  }
  LoadedCheckpoint out{make_model(spec, cfg), {}};
  out.model.clamp = clamp;
  out.meta.detach_horizon = horizon;
  for (const auto& [k, v] : kv)
    if (!is_standard_sidecar_key(k)) out.meta.extra[k] = v;

  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorKind::kData, "cannot open checkpoint " + path.string());
  char magic[8];
  is.read(magic, 8);
  require(static_cast<bool>(is) && std::memcmp(magic, kCheckpointMagic, 8) == 0, ErrorKind::kData,
          "not a checkpoint file: " + path.string());
  require(binio::read_u64(is) == kCheckpointVersion, ErrorKind::kData, "unsupported checkpoint version");
  const std::string system = binio::read_str(is);
  require(system == spec.name, ErrorKind::kData, "checkpoint is for system '" + system + "'");
  require(binio::read_u64(is) == spec.state_dim && binio::read_u64(is) == spec.obs_dim, ErrorKind::kData,
          "checkpoint dimensions do not match the system");
  require(binio::read_u64(is) == cfg.st_dim, ErrorKind::kData, "checkpoint encoder width mismatch");
  std::size_t sizes[kPartitionCount];
  for (std::size_t p = 0; p < kPartitionCount; ++p) {
    sizes[p] = binio::read_u64(is);
    require(sizes[p] == out.model.params.partition_size(static_cast<Partition>(p)), ErrorKind::kData,
            "checkpoint partition '" + partition_name(static_cast<Partition>(p)) + "' has the wrong size");
  }
  auto& ps = out.model.params;
  for (std::size_t p = 0; p < kPartitionCount; ++p) {
    const Vector flat = binio::read_f64s(is, sizes[p]);
    std::size_t off = 0;
    for (std::size_t id = 0; id < ps.size(); ++id) {
      if (ps.entry(id).partition != static_cast<Partition>(p)) continue;
      Matrix& v = ps.value(id);
      std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
                flat.begin() + static_cast<std::ptrdiff_t>(off + v.size()), v.data().begin());
      off += v.size();
    }
  }
  require(all_finite(std::span<const double>(ps.flatten(Partition::kSetTransformer))), ErrorKind::kData,
          "checkpoint holds non-finite weights");
  return out;
}

}  // namespace mnmef
