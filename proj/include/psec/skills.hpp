#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "psec/compose.hpp"
#include "psec/diffusion.hpp"
#include "psec/envs.hpp"
#include "psec/lora.hpp"
#include "psec/mlp.hpp"
#include "psec/sha256.hpp"

namespace psec {

// --- binary tensor format ---
// magic "PSEC", version u32 LE, then per tensor:
//   name length u32 LE, UTF-8 name, rank u32 LE, dims u64 LE each,
//   payload as little-endian IEEE-754 doubles, 32-byte SHA-256 of the payload.

constexpr std::uint32_t kTensorFormatVersion = 1;

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_f64(std::vector<std::uint8_t>& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  put_u64(out, bits);
}

struct Reader {
  const std::uint8_t* p;
  const std::uint8_t* end;

  bool eof() const { return p >= end; }

  void need(std::size_t n, const std::string& what) {
    if (static_cast<std::size_t>(end - p) < n)
      throw std::runtime_error("corrupt file: truncated " + what);
  }
  std::uint32_t get_u32(const std::string& what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[i]) << (8 * i);
    p += 4;
    return v;
  }
  std::uint64_t get_u64(const std::string& what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[i]) << (8 * i);
    p += 8;
    return v;
  }
  double get_f64(const std::string& what) {
    std::uint64_t bits = get_u64(what);
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
  }
};

}  // namespace detail

inline std::vector<std::uint8_t> serialize_params(const ParamStore& params) {
  std::vector<std::uint8_t> out;
  out.push_back('P');
  out.push_back('S');
  out.push_back('E');
  out.push_back('C');
  detail::put_u32(out, kTensorFormatVersion);
  for (const auto& name : params.names) {
    const Matrix& m = params.at(name);
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    detail::put_u32(out, 2);  // rank: matrices everywhere (vectors are n x 1)
    detail::put_u64(out, m.rows);
    detail::put_u64(out, m.cols);
    std::vector<std::uint8_t> payload;
    payload.reserve(m.data.size() * 8);
    for (double d : m.data) detail::put_f64(payload, d);
    auto digest = Sha256::hash(payload.data(), payload.size());
    out.insert(out.end(), payload.begin(), payload.end());
    out.insert(out.end(), digest.begin(), digest.end());
  }
  return out;
}

inline ParamStore deserialize_params(const std::vector<std::uint8_t>& buf) {
  detail::Reader r{buf.data(), buf.data() + buf.size()};
  r.need(4, "magic");
  if (std::memcmp(r.p, "PSEC", 4) != 0) throw std::runtime_error("corrupt file: bad magic");
  r.p += 4;
  const std::uint32_t version = r.get_u32("version");
  if (version != kTensorFormatVersion)
    throw std::runtime_error("version mismatch: file version " + std::to_string(version));
  ParamStore params;
  while (!r.eof()) {
    const std::uint32_t name_len = r.get_u32("name length");
    r.need(name_len, "name");
    std::string name(reinterpret_cast<const char*>(r.p), name_len);
    r.p += name_len;
    const std::uint32_t rank = r.get_u32("rank of " + name);
    if (rank != 2) throw std::runtime_error("corrupt file: unexpected rank for " + name);
    const std::uint64_t rows = r.get_u64("dims of " + name);
    const std::uint64_t cols = r.get_u64("dims of " + name);
    const std::size_t payload_bytes = static_cast<std::size_t>(rows * cols) * 8;
    r.need(payload_bytes + 32, "payload of " + name);
    auto digest = Sha256::hash(r.p, payload_bytes);
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < m.data.size(); ++i) {
      m.data[i] = detail::Reader{r.p + i * 8, r.end}.get_f64("value");
    }
    r.p += payload_bytes;
    if (std::memcmp(digest.data(), r.p, 32) != 0)
      throw std::runtime_error("checksum mismatch in tensor " + name);
    r.p += 32;
    params.add(name, std::move(m));
  }
  return params;
}

inline std::string param_store_sha(const ParamStore& params) {
  auto buf = serialize_params(params);
  return Sha256::hex(Sha256::hash(buf.data(), buf.size()));
}

// Atomic write: temp file then rename. Returns the file's SHA-256 hex.
inline std::string write_param_file(const std::filesystem::path& path,
                                    const ParamStore& params) {
  auto buf = serialize_params(params);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size()));
  }
  std::filesystem::rename(tmp, path);
  return Sha256::hex(Sha256::hash(buf.data(), buf.size()));
}

inline ParamStore read_param_file(const std::filesystem::path& path,
                                  const std::string& expected_sha = "") {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
  if (!expected_sha.empty()) {
    std::string got = Sha256::hex(Sha256::hash(buf.data(), buf.size()));
    if (got != expected_sha)
      throw std::runtime_error("checksum mismatch for file " + path.filename().string());
  }
  return deserialize_params(buf);
}

// --- skill library ---

struct SkillProvenance {
  std::string dataset_id;
  std::string weight_kind;  // unit | reward | safety
  std::uint64_t steps = 0;
  std::uint64_t seed = 0;
  double final_loss = 0.0;
};

struct SkillEntry {
  std::string name;
  LoraAdapter adapter;
  SkillProvenance provenance;
  std::string created_at;
};

struct ComposerEntry {
  std::string name;
  CompositionNet net;
  CompositionMode mode = CompositionMode::ParameterLevel;
  std::vector<std::string> skill_names;
};

struct SkillLibrary {
  NoisePredictor base;
  std::string base_hash;  // sha256 of the serialized base params
  DatasetStats normalization;
  std::size_t diffusion_T = 5;
  std::vector<SkillEntry> entries;
  std::vector<ComposerEntry> composers;

  const SkillEntry& find(const std::string& name) const {
    for (const SkillEntry& e : entries)
      if (e.name == name) return e;
    throw std::invalid_argument("unknown skill: " + name);
  }

  bool has(const std::string& name) const {
    for (const SkillEntry& e : entries)
      if (e.name == name) return true;
    return false;
  }

  void add_skill(SkillEntry entry) {
    if (has(entry.name)) throw std::invalid_argument("duplicate skill name: " + entry.name);
    if (entry.adapter.b_mats.size() != base.spec.num_layers())
      throw std::invalid_argument("add_skill: adapter layer count mismatch");
    for (std::size_t l = 0; l < entry.adapter.b_mats.size(); ++l) {
      const Matrix& w = base.params.at(weight_name(l));
      if (entry.adapter.b_mats[l].rows != w.rows || entry.adapter.a_mats[l].cols != w.cols)
        throw std::invalid_argument("add_skill: adapter dims mismatch at layer " +
                                    std::to_string(l));
    }
    entries.push_back(std::move(entry));
  }

  void remove_skill(const std::string& name) {
    for (auto it = entries.begin(); it != entries.end(); ++it) {
      if (it->name == name) {
        entries.erase(it);
        return;
      }
    }
    throw std::invalid_argument("unknown skill: " + name);
  }

  const ComposerEntry& find_composer(const std::string& name) const {
    for (const ComposerEntry& e : composers)
      if (e.name == name) return e;
    throw std::invalid_argument("unknown composer: " + name);
  }
};

inline SkillLibrary make_library(NoisePredictor base, DatasetStats norm,
                                 std::size_t diffusion_T) {
  SkillLibrary lib;
  lib.base = std::move(base);
  lib.base_hash = param_store_sha(lib.base.params);
  lib.normalization = std::move(norm);
  lib.diffusion_T = diffusion_T;
  return lib;
}

constexpr std::uint32_t kLibraryFormatVersion = 1;

inline void save_library(const SkillLibrary& lib, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format_version"] = kLibraryFormatVersion;
  {
    std::string sha = write_param_file(dir / "base.bin", lib.base.params);
    nlohmann::json b;
    b["file"] = "base.bin";
    b["sha256"] = sha;
    b["state_dim"] = lib.base.state_dim;
    b["action_dim"] = lib.base.action_dim;
    b["layer_dims"] = lib.base.spec.layer_dims;
    b["diffusion_T"] = lib.diffusion_T;
    manifest["base"] = b;
  }
  manifest["normalization"] = {{"mean", lib.normalization.mean},
                               {"std", lib.normalization.stddev}};
  manifest["skills"] = nlohmann::json::array();
  for (const SkillEntry& e : lib.entries) {
    const std::string file = "skill_" + e.name + ".bin";
    std::string sha = write_param_file(dir / file, e.adapter.as_params());
    nlohmann::json j;
    j["name"] = e.name;
    j["file"] = file;
    j["sha256"] = sha;
    j["rank"] = e.adapter.rank;
    j["scale"] = e.adapter.scale;
    j["created_at"] = e.created_at;
    j["provenance"] = {{"dataset", e.provenance.dataset_id},
                       {"weight_fn", e.provenance.weight_kind},
                       {"steps", e.provenance.steps},
                       {"seed", e.provenance.seed},
                       {"final_loss", e.provenance.final_loss}};
    manifest["skills"].push_back(j);
  }
  manifest["composers"] = nlohmann::json::array();
  for (const ComposerEntry& e : lib.composers) {
    const std::string file = "composer_" + e.name + ".bin";
    std::string sha = write_param_file(dir / file, e.net.params);
    nlohmann::json j;
    j["name"] = e.name;
    j["file"] = file;
    j["sha256"] = sha;
    j["mode"] = composition_mode_name(e.mode);
    j["skills"] = e.skill_names;
    j["layer_dims"] = e.net.spec.layer_dims;
    manifest["composers"].push_back(j);
  }
  std::filesystem::path tmp = dir / "manifest.json.tmp";
  {
    std::ofstream out(tmp);
    out << manifest.dump(2) << "\n";
  }
  std::filesystem::rename(tmp, dir / "manifest.json");
}

inline SkillLibrary load_library(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("cannot read manifest at " + dir.string());
  nlohmann::json manifest = nlohmann::json::parse(in);
  const std::uint32_t version = manifest.at("format_version");
  if (version != kLibraryFormatVersion)
    throw std::runtime_error("version mismatch: library format " + std::to_string(version));
  SkillLibrary lib;
  const nlohmann::json& b = manifest.at("base");
  lib.base.state_dim = b.at("state_dim");
  lib.base.action_dim = b.at("action_dim");
  lib.base.spec.layer_dims = b.at("layer_dims").get<std::vector<std::size_t>>();
  lib.base.params =
      read_param_file(dir / b.at("file").get<std::string>(), b.at("sha256"));
  lib.base_hash = b.at("sha256");
  lib.diffusion_T = b.at("diffusion_T");
  lib.normalization.mean = manifest.at("normalization").at("mean").get<std::vector<double>>();
  lib.normalization.stddev =
      manifest.at("normalization").at("std").get<std::vector<double>>();
  for (const nlohmann::json& j : manifest.at("skills")) {
    SkillEntry e;
    e.name = j.at("name");
    e.created_at = j.at("created_at");
    e.provenance.dataset_id = j.at("provenance").at("dataset");
    e.provenance.weight_kind = j.at("provenance").at("weight_fn");
    e.provenance.steps = j.at("provenance").at("steps");
    e.provenance.seed = j.at("provenance").at("seed");
    e.provenance.final_loss = j.at("provenance").at("final_loss");
    ParamStore p = read_param_file(dir / j.at("file").get<std::string>(), j.at("sha256"));
    e.adapter.rank = j.at("rank");
    e.adapter.scale = j.at("scale");
    for (std::size_t l = 0; l < lib.base.spec.num_layers(); ++l) {
      e.adapter.b_mats.push_back(p.at("layer" + std::to_string(l) + ".B"));
      e.adapter.a_mats.push_back(p.at("layer" + std::to_string(l) + ".A"));
    }
    lib.entries.push_back(std::move(e));
  }
  if (manifest.contains("composers")) {
    for (const nlohmann::json& j : manifest.at("composers")) {
      ComposerEntry e;
      e.name = j.at("name");
      e.mode = composition_mode_from_name(j.at("mode"));
      e.skill_names = j.at("skills").get<std::vector<std::string>>();
      e.net.spec.layer_dims = j.at("layer_dims").get<std::vector<std::size_t>>();
      e.net.state_dim = e.net.spec.input_dim();
      e.net.k = e.net.spec.output_dim();
      e.net.params =
          read_param_file(dir / j.at("file").get<std::string>(), j.at("sha256"));
      lib.composers.push_back(std::move(e));
    }
  }
  return lib;
}

}  // namespace psec
