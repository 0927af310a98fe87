#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "jea/trainer.hpp"

namespace jea {

inline constexpr int kCheckpointVersion = 1;

namespace fs = std::filesystem;

// Writes `bytes` to a sibling temp file, then renames over `path`.
inline void write_file_atomic(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline std::string encode_f32_le(std::span<const float> v) {
  std::string out(v.size() * 4, '\0');
  for (std::size_t i = 0; i < v.size(); ++i) {
    auto u = std::bit_cast<std::uint32_t>(v[i]);
    for (int b = 0; b < 4; ++b) out[i * 4 + static_cast<std::size_t>(b)] = static_cast<char>((u >> (8 * b)) & 0xffu);
  }
  return out;
}

inline void decode_f32_le(std::string_view bytes, std::span<float> out) {
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b)
      u |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[i * 4 + static_cast<std::size_t>(b)])) << (8 * b);
    out[i] = std::bit_cast<float>(u);
  }
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return h;
}

namespace detail {

template <typename F>
void visit_state(TrainState& st, F&& f) {
  auto group = [&](const std::string& prefix, ModelParams<float>& p) {
    p.visit([&](const std::string& name, Tensor<float>& t) { f(prefix + "." + name, t); });
  };
  group("student", st.student);
  group("teacher", st.teacher);
  group("adam_m", st.adam_m);
  group("adam_v", st.adam_v);
  f(std::string("dino_center"), st.dino_center);
  f(std::string("ibot_center"), st.ibot_center);
}

inline void write_model_config(std::ostream& os, const ModelConfig& c) {
  os << "model.image_size=" << c.image_size << '\n'
     << "model.patch_size=" << c.patch_size << '\n'
     << "model.embed_dim=" << c.embed_dim << '\n'
     << "model.depth=" << c.depth << '\n'
     << "model.num_heads=" << c.num_heads << '\n'
     << "model.mlp_ratio=" << c.mlp_ratio << '\n'
     << "model.head_hidden_dim=" << c.head_hidden_dim << '\n'
     << "model.head_bottleneck_dim=" << c.head_bottleneck_dim << '\n'
     << "model.num_prototypes=" << c.num_prototypes << '\n'
     << "model.channels=" << c.channels << '\n'
     << "model.drop_path_rate=" << std::setprecision(17) << c.drop_path_rate << '\n';
}

inline ModelConfig read_model_config(const std::map<std::string, std::string>& kv) {
  auto get = [&](const std::string& k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw CorruptionError("checkpoint manifest missing " + k);
    return it->second;
  };
  auto num = [&](const std::string& k) { return static_cast<std::size_t>(std::stoull(get(k))); };
  ModelConfig c;
  c.image_size = num("model.image_size");
  c.patch_size = num("model.patch_size");
  c.embed_dim = num("model.embed_dim");
  c.depth = num("model.depth");
  c.num_heads = num("model.num_heads");
  c.mlp_ratio = num("model.mlp_ratio");
  c.head_hidden_dim = num("model.head_hidden_dim");
  c.head_bottleneck_dim = num("model.head_bottleneck_dim");
  c.num_prototypes = num("model.num_prototypes");
  c.channels = num("model.channels");
  c.drop_path_rate = std::stod(get("model.drop_path_rate"));
  return c;
}

}  // namespace detail

struct CheckpointInfo {
  std::size_t step = 0;
  ModelConfig model;
  std::map<std::string, std::string> extra;  // caller-supplied key/values
};

// Directory layout: manifest.txt plus one <name>.f32 blob per tensor. The
// manifest is written last, so a directory without one is incomplete.
inline void checkpoint_save(const TrainState& state, const fs::path& dir,
                            const std::map<std::string, std::string>& extra = {}) {
  fs::create_directories(dir);
  std::ostringstream manifest;
  manifest << "format_version=" << kCheckpointVersion << '\n' << "step=" << state.step << '\n';
  detail::write_model_config(manifest, state.model());
  for (const auto& [k, v] : extra) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
      throw ParameterError("checkpoint: invalid extra key/value " + k);
    manifest << "extra." << k << '=' << v << '\n';
  }
  detail::visit_state(const_cast<TrainState&>(state), [&](const std::string& name, Tensor<float>& t) {
    const std::string bytes = encode_f32_le(t.data());
    const std::string file = name + ".f32";
    write_file_atomic(dir / file, bytes);
    manifest << "blob." << name << '=' << file << ' ' << t.size() << ' ' << hex64(fnv1a(bytes)) << '\n';
  });
  write_file_atomic(dir / "manifest.txt", manifest.str());
}

inline std::map<std::string, std::string> read_manifest(const fs::path& dir) {
  const fs::path mp = dir / "manifest.txt";
  if (!fs::exists(mp)) throw CorruptionError("checkpoint: missing manifest in " + dir.string());
  std::map<std::string, std::string> kv;
  std::istringstream in(read_text_file(mp));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CorruptionError("checkpoint: malformed manifest line: " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

inline CheckpointInfo checkpoint_info(const fs::path& dir) {
  const auto kv = read_manifest(dir);
  auto it = kv.find("format_version");
  if (it == kv.end()) throw CorruptionError("checkpoint: manifest has no format_version");
  if (it->second != std::to_string(kCheckpointVersion))
    throw MigrationError("checkpoint: format version " + it->second + " is not supported (expected " +
                         std::to_string(kCheckpointVersion) + ")");
  CheckpointInfo info;
  auto st = kv.find("step");
  if (st == kv.end()) throw CorruptionError("checkpoint: manifest has no step");
  info.step = static_cast<std::size_t>(std::stoull(st->second));
  info.model = detail::read_model_config(kv);
  for (const auto& [k, v] : kv)
    if (k.rfind("extra.", 0) == 0) info.extra[k.substr(6)] = v;
  return info;
}

inline TrainState checkpoint_load(const fs::path& dir, CheckpointInfo* info_out = nullptr) {
  const auto kv = read_manifest(dir);
  const CheckpointInfo info = checkpoint_info(dir);
  TrainState st;
  try {
    info.model.validate();
  } catch (const ConfigError& e) {
    throw CorruptionError(std::string("checkpoint: invalid model config: ") + e.what());
  }
  st.student = ModelParams<float>::shaped_like(info.model);
  st.teacher = st.student;
  st.adam_m = st.student;
  st.adam_v = st.student;
  st.dino_center = Tensor<float>({info.model.num_prototypes});
  st.ibot_center = Tensor<float>({info.model.num_prototypes});
  st.step = info.step;
  detail::visit_state(st, [&](const std::string& name, Tensor<float>& t) {
    auto it = kv.find("blob." + name);
    if (it == kv.end()) throw CorruptionError("checkpoint: manifest has no entry for " + name);
    std::istringstream fields(it->second);
    std::string file, sum;
    std::size_t count = 0;
    if (!(fields >> file >> count >> sum)) throw CorruptionError("checkpoint: malformed entry for " + name);
    if (count != t.size())
      throw CorruptionError("checkpoint: " + name + " holds " + std::to_string(count) + " values, expected " +
                            std::to_string(t.size()));
    const fs::path bp = dir / file;
    if (!fs::exists(bp)) throw CorruptionError("checkpoint: missing blob " + file);
    const std::string bytes = read_text_file(bp);
    if (bytes.size() != count * 4)
      throw CorruptionError("checkpoint: blob " + file + " has " + std::to_string(bytes.size()) + " bytes, expected " +
                            std::to_string(count * 4));
    if (hex64(fnv1a(bytes)) != sum) throw CorruptionError("checkpoint: checksum mismatch in " + file);
    decode_f32_le(bytes, t.data());
  });
  if (info_out) *info_out = info;
  return st;
}

}  // namespace jea
