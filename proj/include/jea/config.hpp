#pragma once

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "jea/augment.hpp"
#include "jea/datasets.hpp"
#include "jea/trainer.hpp"
#include "jea/vit.hpp"

namespace jea {

struct DataConfig {
  std::string source = "synthetic";  // synthetic | cifar
  std::size_t n_samples = 20000;     // 0 = every sample of a file-backed source
  // Synthetic training sets are the first n_samples of a fixed permutation of
  // a pool of this size; validation samples are drawn from beyond the pool.
  std::size_t pool_size = 100000;
  std::size_t n_val = 2000;
  std::size_t n_classes = 10;
  double shape_fraction = 0.6;
  double color_fraction = 0.4;
  double noise_std = 0.03;
  std::uint64_t seed = 0;
  std::string train_paths;  // cifar: comma-separated binary batch files
  std::string val_path;

  SyntheticSpec synthetic_spec() const {
    SyntheticSpec s;
    s.n_samples = n_samples;
    s.n_classes = n_classes;
    s.shape_fraction = shape_fraction;
    s.color_fraction = color_fraction;
    s.noise_std = noise_std;
    s.seed = seed;
    return s;
  }
};

struct EvalConfig {
  double interval = 0.2;  // evaluate every interval * total_steps, plus step 0 and the final step
  bool at_start = true;
  std::size_t probe_train_size = 5000;
  std::size_t probe_epochs = 100;
  double probe_lr = 1e-2;
  std::size_t probe_batch_size = 16;
  std::size_t knn_k = 20;
  std::size_t invariance_images = 100;
  std::size_t invariance_views = 16;
  std::size_t provenance_steps = 1;  // steps whose view provenance is logged
  std::size_t log_every = 50;
};

struct RunConfig {
  std::string run_id = "run";
  std::string output_dir = "runs";
  std::string model_preset = "desk";
  std::string train_preset = "low_compute";
  ModelConfig model;
  TrainConfig train;
  AugmentationConfig augment;
  DataConfig data;
  EvalConfig eval;

  void validate() const {
    model.validate();
    train.validate();
    augment.validate();
    if (augment.global_size != model.image_size)
      throw ConfigError("augment.global_size must equal model.image_size");
    if (augment.global_size % model.patch_size != 0 || augment.local_size % model.patch_size != 0)
      throw ConfigError("view sizes must be multiples of model.patch_size");
    if (data.source != "synthetic" && data.source != "cifar")
      throw ConfigError("data.source must be synthetic or cifar, got '" + data.source + "'");
    if (data.source == "synthetic") {
      data.synthetic_spec().validate();
      if (data.n_samples == 0 || data.n_samples > data.pool_size)
        throw ConfigError("data.n_samples must lie in [1, data.pool_size]");
      if (eval.probe_train_size > data.pool_size)
        throw ConfigError("eval.probe_train_size exceeds data.pool_size");
    }
    if (data.source == "cifar" && (data.train_paths.empty() || data.val_path.empty()))
      throw ConfigError("cifar source needs data.train_paths and data.val_path");
    if (!(eval.interval > 0.0 && eval.interval <= 1.0)) throw ConfigError("eval.interval must lie in (0,1]");
    if (eval.invariance_views < 2) throw ConfigError("eval.invariance_views must be at least 2");
    if (eval.knn_k == 0) throw ConfigError("eval.knn_k must be at least 1");
    if (run_id.empty() || run_id.find_first_of("/\\") != std::string::npos)
      throw ConfigError("run.id must be a non-empty name without path separators");
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] inline void type_mismatch(const std::string& key, const char* expected, const std::string& v) {
  throw ConfigError("type mismatch for key " + key + ": expected " + expected + ", got '" + v + "'");
}

template <typename T>
T parse_value(const std::string& key, const std::string& v);

template <>
inline std::size_t parse_value<std::size_t>(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty()) type_mismatch(key, "unsigned integer", v);
  return out;
}

template <>
inline double parse_value<double>(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty()) type_mismatch(key, "number", v);
  return out;
}

template <>
inline bool parse_value<bool>(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  type_mismatch(key, "boolean", v);
}

template <>
inline std::string parse_value<std::string>(const std::string&, const std::string& v) {
  return v;
}

template <>
inline AugmentationMode parse_value<AugmentationMode>(const std::string& key, const std::string& v) {
  try {
    return parse_mode(v);
  } catch (const ConfigError&) {
    throw ConfigError("invalid value for key " + key + ": '" + v +
                      "' (expected original, shared, crop_resize or crop)");
  }
}

template <>
inline ScaleRange parse_value<ScaleRange>(const std::string& key, const std::string& v) {
  const auto comma = v.find(',');
  if (comma == std::string::npos) type_mismatch(key, "range 'lo,hi'", v);
  return {parse_value<double>(key, trim(v.substr(0, comma))), parse_value<double>(key, trim(v.substr(comma + 1)))};
}

inline std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

inline std::string format_value(std::size_t v) { return std::to_string(v); }
inline std::string format_value(double v) { return format_double(v); }
inline std::string format_value(bool v) { return v ? "true" : "false"; }
inline std::string format_value(const std::string& v) { return v; }
inline std::string format_value(AugmentationMode m) { return std::string(mode_name(m)); }
inline std::string format_value(ScaleRange r) { return format_double(r.lo) + "," + format_double(r.hi); }

struct KeySpec {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename Access>
KeySpec key(std::string name, Access access) {
  using Field = std::remove_cvref_t<decltype(access(std::declval<RunConfig&>()))>;
  KeySpec k;
  k.name = name;
  k.set = [name, access](RunConfig& c, const std::string& v) { access(c) = parse_value<Field>(name, v); };
  k.get = [access](const RunConfig& c) { return format_value(access(const_cast<RunConfig&>(c))); };
  return k;
}

template <typename Access>
KeySpec key_u64(std::string name, Access access) {
  KeySpec k;
  k.name = name;
  k.set = [name, access](RunConfig& c, const std::string& v) {
    access(c) = static_cast<std::uint64_t>(parse_value<std::size_t>(name, v));
  };
  k.get = [access](const RunConfig& c) { return std::to_string(access(const_cast<RunConfig&>(c))); };
  return k;
}

}  // namespace detail

#define JEA_KEY(name, expr) detail::key(name, [](RunConfig& c) -> auto& { return expr; })
#define JEA_KEY_U64(name, expr) detail::key_u64(name, [](RunConfig& c) -> auto& { return expr; })

// Every settable key, in serialization order.
inline const std::vector<detail::KeySpec>& config_keys() {
  static const std::vector<detail::KeySpec> keys = {
      JEA_KEY("run.id", c.run_id),
      JEA_KEY("run.output_dir", c.output_dir),
      JEA_KEY("mode", c.augment.mode),
      JEA_KEY("model.preset", c.model_preset),
      JEA_KEY("model.image_size", c.model.image_size),
      JEA_KEY("model.patch_size", c.model.patch_size),
      JEA_KEY("model.embed_dim", c.model.embed_dim),
      JEA_KEY("model.depth", c.model.depth),
      JEA_KEY("model.num_heads", c.model.num_heads),
      JEA_KEY("model.mlp_ratio", c.model.mlp_ratio),
      JEA_KEY("model.head_hidden_dim", c.model.head_hidden_dim),
      JEA_KEY("model.head_bottleneck_dim", c.model.head_bottleneck_dim),
      JEA_KEY("model.num_prototypes", c.model.num_prototypes),
      JEA_KEY("model.drop_path_rate", c.model.drop_path_rate),
      JEA_KEY("train.preset", c.train_preset),
      JEA_KEY("train.batch_size", c.train.batch_size),
      JEA_KEY("train.total_steps", c.train.total_steps),
      JEA_KEY("train.lr", c.train.lr),
      JEA_KEY("train.warmup_steps", c.train.warmup_steps),
      JEA_KEY("train.min_lr", c.train.min_lr),
      JEA_KEY("train.weight_decay", c.train.weight_decay),
      JEA_KEY("train.weight_decay_end", c.train.weight_decay_end),
      JEA_KEY("train.teacher_temp_start", c.train.teacher_temp_start),
      JEA_KEY("train.teacher_temp_end", c.train.teacher_temp_end),
      JEA_KEY("train.teacher_temp_warmup_steps", c.train.teacher_temp_warmup_steps),
      JEA_KEY("train.student_temp", c.train.student_temp),
      JEA_KEY("train.center_momentum", c.train.center_momentum),
      JEA_KEY("train.ema_start", c.train.ema_start),
      JEA_KEY("train.ibot_weight", c.train.ibot_weight),
      JEA_KEY("train.mask_ratio", c.train.mask_ratio),
      JEA_KEY("train.clip_grad", c.train.clip_grad),
      JEA_KEY("train.freeze_prototypes_steps", c.train.freeze_prototypes_steps),
      JEA_KEY("train.unit_prototypes", c.train.unit_prototypes),
      JEA_KEY("train.beta1", c.train.beta1),
      JEA_KEY("train.beta2", c.train.beta2),
      JEA_KEY("train.adam_eps", c.train.adam_eps),
      JEA_KEY_U64("train.seed", c.train.seed),
      JEA_KEY("augment.global_scale", c.augment.global_scale),
      JEA_KEY("augment.local_scale", c.augment.local_scale),
      JEA_KEY("augment.ratio", c.augment.ratio),
      JEA_KEY("augment.global_size", c.augment.global_size),
      JEA_KEY("augment.local_size", c.augment.local_size),
      JEA_KEY("augment.crop_mode_resize_to", c.augment.crop_mode_resize_to),
      JEA_KEY("augment.n_local", c.augment.n_local),
      JEA_KEY("augment.jitter_p", c.augment.photometric.jitter_p),
      JEA_KEY("augment.brightness", c.augment.photometric.brightness),
      JEA_KEY("augment.contrast", c.augment.photometric.contrast),
      JEA_KEY("augment.saturation", c.augment.photometric.saturation),
      JEA_KEY("augment.hue", c.augment.photometric.hue),
      JEA_KEY("augment.grayscale_p", c.augment.photometric.grayscale_p),
      JEA_KEY("augment.blur_p_first", c.augment.photometric.blur_p[0]),
      JEA_KEY("augment.blur_p_second", c.augment.photometric.blur_p[1]),
      JEA_KEY("augment.blur_p_local", c.augment.photometric.blur_p[2]),
      JEA_KEY("augment.blur_sigma_min", c.augment.photometric.blur_sigma_min),
      JEA_KEY("augment.blur_sigma_max", c.augment.photometric.blur_sigma_max),
      JEA_KEY("augment.flip_p", c.augment.photometric.flip_p),
      JEA_KEY("augment.solarize_p_first", c.augment.photometric.solarize_p[0]),
      JEA_KEY("augment.solarize_p_second", c.augment.photometric.solarize_p[1]),
      JEA_KEY("augment.solarize_p_local", c.augment.photometric.solarize_p[2]),
      JEA_KEY("augment.solarize_threshold", c.augment.photometric.solarize_threshold),
      JEA_KEY("data.source", c.data.source),
      JEA_KEY("data.n_samples", c.data.n_samples),
      JEA_KEY("data.pool_size", c.data.pool_size),
      JEA_KEY("data.n_val", c.data.n_val),
      JEA_KEY("data.n_classes", c.data.n_classes),
      JEA_KEY("data.shape_fraction", c.data.shape_fraction),
      JEA_KEY("data.color_fraction", c.data.color_fraction),
      JEA_KEY("data.noise_std", c.data.noise_std),
      JEA_KEY_U64("data.seed", c.data.seed),
      JEA_KEY("data.train_paths", c.data.train_paths),
      JEA_KEY("data.val_path", c.data.val_path),
      JEA_KEY("eval.interval", c.eval.interval),
      JEA_KEY("eval.at_start", c.eval.at_start),
      JEA_KEY("eval.probe_train_size", c.eval.probe_train_size),
      JEA_KEY("eval.probe_epochs", c.eval.probe_epochs),
      JEA_KEY("eval.probe_lr", c.eval.probe_lr),
      JEA_KEY("eval.probe_batch_size", c.eval.probe_batch_size),
      JEA_KEY("eval.knn_k", c.eval.knn_k),
      JEA_KEY("eval.invariance_images", c.eval.invariance_images),
      JEA_KEY("eval.invariance_views", c.eval.invariance_views),
      JEA_KEY("eval.provenance_steps", c.eval.provenance_steps),
      JEA_KEY("eval.log_every", c.eval.log_every),
  };
  return keys;
}

#undef JEA_KEY
#undef JEA_KEY_U64

// Named model sizes.
inline void apply_model_preset(RunConfig& c, const std::string& name) {
  ModelConfig m;
  if (name == "desk") {
  } else if (name == "tiny") {
    m.embed_dim = 64;
    m.num_heads = 4;
    m.head_hidden_dim = 256;
  } else if (name == "small") {
    m.embed_dim = 192;
    m.depth = 6;
    m.num_heads = 6;
    m.head_hidden_dim = 768;
    m.head_bottleneck_dim = 128;
    m.num_prototypes = 2048;
  } else {
    throw ConfigError("unknown model preset: " + name + " (expected desk, tiny or small)");
  }
  m.image_size = c.model.image_size;
  m.channels = c.model.channels;
  c.model = m;
  c.model_preset = name;
}

// Named training regimes. low_compute and high_compute mirror the two
// hyperparameter families; `desk` is the reduced-batch setting used for the
// long acceptance runs on a single core.
inline void apply_train_preset(RunConfig& c, const std::string& name) {
  TrainConfig t = c.train;
  if (name == "low_compute") {
    t.total_steps = 5000;
    t.batch_size = 128;
    t.lr = 1e-3;
    t.warmup_steps = 500;
    t.teacher_temp_warmup_steps = 500;
  } else if (name == "high_compute") {
    t.total_steps = 25000;
    t.batch_size = 256;
    t.lr = 5e-4;
    t.warmup_steps = 2500;
    t.teacher_temp_warmup_steps = 2500;
  } else if (name == "desk") {
    t.total_steps = 5000;
    t.batch_size = 32;
    t.lr = 5e-4;
    t.warmup_steps = 500;
    t.teacher_temp_warmup_steps = 500;
  } else {
    throw ConfigError("unknown train preset: " + name + " (expected low_compute, high_compute or desk)");
  }
  c.train = t;
  c.train_preset = name;
}

using ConfigEntries = std::vector<std::pair<std::string, std::string>>;

// key=value lines; '#' starts a comment; blank lines ignored.
inline ConfigEntries parse_config_text(const std::string& text, const std::string& origin = "config") {
  ConfigEntries out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key=value, got '" + t + "'");
    out.emplace_back(detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
  }
  return out;
}

inline ConfigEntries parse_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return parse_config_text(os.str(), path.string());
}

// "--key=value" or "key=value".
inline ConfigEntries parse_config_flags(const std::vector<std::string>& flags) {
  ConfigEntries out;
  for (auto f : flags) {
    if (f.rfind("--", 0) == 0) f = f.substr(2);
    const auto eq = f.find('=');
    if (eq == std::string::npos) throw ConfigError("expected --key=value, got '" + f + "'");
    out.emplace_back(f.substr(0, eq), f.substr(eq + 1));
  }
  return out;
}

inline const detail::KeySpec& find_key(const std::string& name) {
  for (const auto& k : config_keys())
    if (k.name == name) return k;
  throw ConfigError("unknown key: " + name);
}

// Defaults, then presets named anywhere in the entries, then the remaining
// entries in order (later ones win, so flags appended after file entries
// override them).
inline RunConfig resolve_config(const ConfigEntries& entries) {
  RunConfig c;
  for (const auto& [k, v] : entries) find_key(k);
  std::string model_preset, train_preset;
  for (const auto& [k, v] : entries) {
    if (k == "model.preset") model_preset = v;
    if (k == "train.preset") train_preset = v;
  }
  if (!model_preset.empty()) apply_model_preset(c, model_preset);
  if (!train_preset.empty()) apply_train_preset(c, train_preset);
  for (const auto& [k, v] : entries)
    if (k != "model.preset" && k != "train.preset") find_key(k).set(c, v);
  c.validate();
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& flags = {}) {
  ConfigEntries e;
  if (!path.empty()) e = parse_config_file(path);
  const auto f = parse_config_flags(flags);
  e.insert(e.end(), f.begin(), f.end());
  return resolve_config(e);
}

inline RunConfig load_config_flags(const std::vector<std::string>& flags) { return load_config({}, flags); }

// Every key with its resolved value, one per line, fixed order.
inline std::string config_text(const RunConfig& c) {
  std::string out;
  for (const auto& k : config_keys()) out += k.name + "=" + k.get(c) + "\n";
  return out;
}

// Hash of everything that affects results (output location and id excluded).
inline std::uint64_t config_hash(const RunConfig& c) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& k : config_keys()) {
    if (k.name == "run.id" || k.name == "run.output_dir") continue;
    for (char ch : k.name + "=" + k.get(c) + "\n") {
      h ^= static_cast<unsigned char>(ch);
      h *= 1099511628211ULL;
    }
  }
  return h;
}

// Output root: $JEA_OUTPUT_ROOT when set, else the working directory.
inline std::filesystem::path output_root() {
  if (const char* env = std::getenv("JEA_OUTPUT_ROOT"); env && *env) return env;
  return std::filesystem::current_path();
}

inline std::filesystem::path run_directory(const RunConfig& c) {
  std::filesystem::path base = c.output_dir;
  if (base.is_relative()) base = output_root() / base;
  return base / c.run_id;
}

}  // namespace jea
