#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "jea/autodiff.hpp"
#include "jea/rng.hpp"

namespace jea {

struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  std::size_t embed_dim = 128;
  std::size_t depth = 4;
  std::size_t num_heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t head_hidden_dim = 512;
  std::size_t head_bottleneck_dim = 64;
  std::size_t num_prototypes = 1024;
  std::size_t channels = 3;
  double drop_path_rate = 0.0;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }

  void validate() const {
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
      throw ConfigError("model: image_size " + std::to_string(image_size) + " not divisible by patch_size " +
                        std::to_string(patch_size));
    if (num_heads == 0 || embed_dim == 0 || embed_dim % num_heads != 0)
      throw ConfigError("model: embed_dim " + std::to_string(embed_dim) + " not divisible by num_heads " +
                        std::to_string(num_heads));
    if (depth == 0 || head_hidden_dim == 0 || head_bottleneck_dim == 0 || num_prototypes == 0 || mlp_ratio == 0 ||
        channels == 0)
      throw ConfigError("model: dimensions must be positive");
    if (drop_path_rate < 0.0 || drop_path_rate >= 1.0) throw ConfigError("model: drop_path_rate must be in [0,1)");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename Slot>
struct BlockSlots {
  Slot ln1_gamma, ln1_beta;
  Slot qkv_weight, qkv_bias;
  Slot proj_weight, proj_bias;
  Slot ln2_gamma, ln2_beta;
  Slot fc1_weight, fc1_bias;
  Slot fc2_weight, fc2_bias;

  template <typename Self, typename F>
  static void visit(Self& self, const std::string& p, F&& f) {
    f(p + "ln1_gamma", self.ln1_gamma);
    f(p + "ln1_beta", self.ln1_beta);
    f(p + "qkv_weight", self.qkv_weight);
    f(p + "qkv_bias", self.qkv_bias);
    f(p + "proj_weight", self.proj_weight);
    f(p + "proj_bias", self.proj_bias);
    f(p + "ln2_gamma", self.ln2_gamma);
    f(p + "ln2_beta", self.ln2_beta);
    f(p + "fc1_weight", self.fc1_weight);
    f(p + "fc1_bias", self.fc1_bias);
    f(p + "fc2_weight", self.fc2_weight);
    f(p + "fc2_bias", self.fc2_bias);
  }
};

// Every learnable tensor of the encoder and projection head. Instantiated
// with Tensor<T> for storage and Var<T> for a bound forward pass; visit()
// yields (name, slot) in a fixed order shared by both.
template <typename Slot>
struct ParamSlots {
  Slot patch_weight, patch_bias;  // [patch_dim, d], [d]
  Slot cls_token;                 // [d]
  Slot pos_embed;                 // [grid*grid + 1, d]
  Slot mask_token;                // [d]
  std::vector<BlockSlots<Slot>> blocks;
  Slot norm_gamma, norm_beta;
  Slot head_fc1_weight, head_fc1_bias;
  Slot head_fc2_weight, head_fc2_bias;
  Slot head_fc3_weight, head_fc3_bias;
  Slot prototypes;  // [num_prototypes, bottleneck]

  template <typename F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, F& f) {
    f(std::string("patch_weight"), self.patch_weight);
    f(std::string("patch_bias"), self.patch_bias);
    f(std::string("cls_token"), self.cls_token);
    f(std::string("pos_embed"), self.pos_embed);
    f(std::string("mask_token"), self.mask_token);
    for (std::size_t i = 0; i < self.blocks.size(); ++i)
      BlockSlots<Slot>::visit(self.blocks[i], "blocks." + std::to_string(i) + ".", f);
    f(std::string("norm_gamma"), self.norm_gamma);
    f(std::string("norm_beta"), self.norm_beta);
    f(std::string("head.fc1_weight"), self.head_fc1_weight);
    f(std::string("head.fc1_bias"), self.head_fc1_bias);
    f(std::string("head.fc2_weight"), self.head_fc2_weight);
    f(std::string("head.fc2_bias"), self.head_fc2_bias);
    f(std::string("head.fc3_weight"), self.head_fc3_weight);
    f(std::string("head.fc3_bias"), self.head_fc3_bias);
    f(std::string("head.prototypes"), self.prototypes);
  }
};

template <typename T>
struct ModelParams : ParamSlots<Tensor<T>> {
  ModelConfig config;

  std::size_t count() const {
    std::size_t n = 0;
    this->visit([&](const std::string&, const Tensor<T>& t) { n += t.size(); });
    return n;
  }

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out = ModelParams<U>::shaped_like(config);
    std::vector<const Tensor<T>*> src;
    this->visit([&](const std::string&, const Tensor<T>& t) { src.push_back(&t); });
    std::size_t i = 0;
    out.visit([&](const std::string&, Tensor<U>& t) { t = src[i++]->template cast<U>(); });
    return out;
  }

  // Zero-filled tensors with the architecture's shapes.
  static ModelParams shaped_like(const ModelConfig& cfg) {
    cfg.validate();
    const std::size_t d = cfg.embed_dim, hid = cfg.mlp_ratio * d, g = cfg.grid();
    ModelParams p;
    p.config = cfg;
    p.patch_weight = Tensor<T>({cfg.patch_dim(), d});
    p.patch_bias = Tensor<T>({d});
    p.cls_token = Tensor<T>({d});
    p.pos_embed = Tensor<T>({g * g + 1, d});
    p.mask_token = Tensor<T>({d});
    p.blocks.resize(cfg.depth);
    for (auto& b : p.blocks) {
      b.ln1_gamma = Tensor<T>({d}, T{1});
      b.ln1_beta = Tensor<T>({d});
      b.qkv_weight = Tensor<T>({d, 3 * d});
      b.qkv_bias = Tensor<T>({3 * d});
      b.proj_weight = Tensor<T>({d, d});
      b.proj_bias = Tensor<T>({d});
      b.ln2_gamma = Tensor<T>({d}, T{1});
      b.ln2_beta = Tensor<T>({d});
      b.fc1_weight = Tensor<T>({d, hid});
      b.fc1_bias = Tensor<T>({hid});
      b.fc2_weight = Tensor<T>({hid, d});
      b.fc2_bias = Tensor<T>({d});
    }
    p.norm_gamma = Tensor<T>({d}, T{1});
    p.norm_beta = Tensor<T>({d});
    p.head_fc1_weight = Tensor<T>({d, cfg.head_hidden_dim});
    p.head_fc1_bias = Tensor<T>({cfg.head_hidden_dim});
    p.head_fc2_weight = Tensor<T>({cfg.head_hidden_dim, cfg.head_hidden_dim});
    p.head_fc2_bias = Tensor<T>({cfg.head_hidden_dim});
    p.head_fc3_weight = Tensor<T>({cfg.head_hidden_dim, cfg.head_bottleneck_dim});
    p.head_fc3_bias = Tensor<T>({cfg.head_bottleneck_dim});
    p.prototypes = Tensor<T>({cfg.num_prototypes, cfg.head_bottleneck_dim});
    return p;
  }
};

// Weight decay applies to layer matrices only. Biases, norms, token tables and
// the prototypes are exempt; prototype rows start at unit norm and decay would
// shrink the logit scale the temperatures are tuned for.
inline bool is_decayed_param(const std::string& name) {
  constexpr std::string_view suffix = "_weight";
  return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
}

template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParams<T> p = ModelParams<T>::shaped_like(cfg);
  Rng rng(seed);
  p.visit([&](const std::string& name, Tensor<T>& t) {
    const bool random = is_decayed_param(name) || name == "cls_token" || name == "pos_embed" || name == "head.prototypes";
    if (!random) return;
    for (auto& v : t.storage()) v = static_cast<T>(rng.truncated_normal(0.02));
  });
  // Unit-norm prototype rows, so logits start as cosines.
  for (std::size_t k = 0; k < p.prototypes.rows(); ++k) {
    auto row = p.prototypes.row(k);
    double n2 = 0.0;
    for (auto v : row) n2 += static_cast<double>(v) * static_cast<double>(v);
    const T inv = static_cast<T>(1.0 / std::sqrt(n2));
    for (auto& v : row) v *= inv;
  }
  return p;
}

// FNV-1a over the raw float bytes of every parameter, in visit order.
template <typename T>
std::uint64_t params_checksum(const ParamSlots<Tensor<T>>& p) {
  std::uint64_t h = 1469598103934665603ULL;
  p.visit([&](const std::string&, const Tensor<T>& t) {
    for (T v : t.data()) {
      const auto f = static_cast<float>(v);
      unsigned char bytes[sizeof(float)];
      std::memcpy(bytes, &f, sizeof(float));
      for (unsigned char b : bytes) {
        h ^= b;
        h *= 1099511628211ULL;
      }
    }
  });
  return h;
}

// ---------------------------------------------------------------------------
// Patches

// CHW image [C,H,W] -> [n_tokens, C*p*p]; tokens row-major over the patch
// grid, each flattened channel-major then row then column.
template <typename T>
Tensor<T> patchify(std::span<const T> chw, std::size_t channels, std::size_t height, std::size_t width,
                   std::size_t patch) {
  if (patch == 0 || height % patch != 0 || width % patch != 0)
    throw DimensionError("patchify: " + std::to_string(height) + "x" + std::to_string(width) +
                         " not divisible by patch " + std::to_string(patch));
  if (chw.size() != channels * height * width) throw DimensionError("patchify: buffer size mismatch");
  const std::size_t gh = height / patch, gw = width / patch, pd = channels * patch * patch;
  Tensor<T> out({gh * gw, pd});
  for (std::size_t ty = 0; ty < gh; ++ty)
    for (std::size_t tx = 0; tx < gw; ++tx) {
      T* dst = out.data().data() + (ty * gw + tx) * pd;
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t y = 0; y < patch; ++y)
          for (std::size_t x = 0; x < patch; ++x)
            *dst++ = chw[(c * height + ty * patch + y) * width + tx * patch + x];
    }
  return out;
}

// Pixels in [0,1] are shifted and scaled to roughly zero mean, unit spread
// before the patch projection, so token features are not dominated by a
// shared brightness offset.
inline constexpr float kPixelMean = 0.5f;
inline constexpr float kPixelStd = 0.25f;

template <typename T>
Tensor<T> input_patches(std::span<const T> chw, std::size_t channels, std::size_t height, std::size_t width,
                        std::size_t patch) {
  Tensor<T> t = patchify(chw, channels, height, width, patch);
  const T mean = static_cast<T>(kPixelMean), inv = static_cast<T>(1.0 / kPixelStd);
  for (auto& v : t.storage()) v = (v - mean) * inv;
  return t;
}

template <typename T>
std::vector<T> unpatchify(const Tensor<T>& tokens, std::size_t channels, std::size_t height, std::size_t width,
                          std::size_t patch) {
  const std::size_t gw = width / patch, pd = channels * patch * patch;
  if (tokens.rows() * pd != channels * height * width || tokens.cols() != pd)
    throw DimensionError("unpatchify: token shape mismatch");
  std::vector<T> chw(channels * height * width);
  for (std::size_t t = 0; t < tokens.rows(); ++t) {
    const std::size_t ty = t / gw, tx = t % gw;
    const T* src = tokens.data().data() + t * pd;
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t y = 0; y < patch; ++y)
        for (std::size_t x = 0; x < patch; ++x) chw[(c * height + ty * patch + y) * width + tx * patch + x] = *src++;
  }
  return chw;
}

// Bilinear (half-pixel centers) resampling matrix from a src x src grid to a
// dst x dst grid: [dst*dst, src*src].
template <typename T>
Tensor<T> grid_interpolation_matrix(std::size_t src, std::size_t dst) {
  Tensor<T> m({dst * dst, src * src});
  std::vector<std::array<std::pair<std::size_t, double>, 2>> axis(dst);
  for (std::size_t o = 0; o < dst; ++o) {
    double s = (static_cast<double>(o) + 0.5) * static_cast<double>(src) / static_cast<double>(dst) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(src - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(s));
    const std::size_t i1 = std::min(i0 + 1, src - 1);
    const double w1 = s - static_cast<double>(i0);
    axis[o] = {{{i0, 1.0 - w1}, {i1, w1}}};
  }
  for (std::size_t oy = 0; oy < dst; ++oy)
    for (std::size_t ox = 0; ox < dst; ++ox)
      for (auto [iy, wy] : axis[oy])
        for (auto [ix, wx] : axis[ox]) m.at(oy * dst + ox, iy * src + ix) += static_cast<T>(wy * wx);
  return m;
}

// Positional table for a grid x grid token layout. Identity for the native grid.
template <typename T>
Var<T> positional_embedding(const Var<T>& pos, std::size_t native_grid, std::size_t grid) {
  if (grid == native_grid) return pos;
  const std::size_t n = native_grid * native_grid;
  std::vector<std::size_t> grid_rows(n);
  std::iota(grid_rows.begin(), grid_rows.end(), std::size_t{1});
  auto cls_row = gather_rows(pos, {0});
  auto resized = matmul(Var<T>::constant(grid_interpolation_matrix<T>(native_grid, grid)), gather_rows(pos, grid_rows));
  return concat_rows<T>({cls_row, resized});
}

// Multiplies each sequence's rows by a per-sequence factor (stochastic depth).
template <typename T>
Var<T> scale_sequences(const Var<T>& x, std::vector<T> factors) {
  const std::size_t per = x.value().size() / factors.size();
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= factors[i / per];
  return make_op<T>(std::move(out), {x}, [per, f = std::move(factors)](Node<T>& self) {
    auto g = self.value.grad();
    auto gx = detail::grad_of(*self.parents[0]);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * f[i / per];
  });
}

// ---------------------------------------------------------------------------
// Forward passes

template <typename T>
using BoundParams = ParamSlots<Var<T>>;

// Wraps stored parameters as graph leaves. With requires_grad=false the
// resulting forward records no tape (teacher / evaluation path).
template <typename T>
BoundParams<T> bind(const ModelParams<T>& p, bool requires_grad) {
  BoundParams<T> b;
  b.blocks.resize(p.blocks.size());
  std::vector<const Tensor<T>*> src;
  p.visit([&](const std::string&, const Tensor<T>& t) { src.push_back(&t); });
  std::size_t i = 0;
  b.visit([&](const std::string&, Var<T>& v) { v = Var<T>::leaf(*src[i++], requires_grad); });
  return b;
}

// Gradients of a bound forward, shaped like the parameters. Slots without a
// gradient come back zero-filled.
template <typename T>
ModelParams<T> collect_grads(const BoundParams<T>& b, const ModelConfig& cfg) {
  ModelParams<T> g = ModelParams<T>::shaped_like(cfg);
  std::vector<const Var<T>*> src;
  b.visit([&](const std::string&, const Var<T>& v) { src.push_back(&v); });
  std::size_t i = 0;
  g.visit([&](const std::string&, Tensor<T>& t) {
    const Var<T>& v = *src[i++];
    if (v.value().has_grad()) std::copy(v.grad().begin(), v.grad().end(), t.storage().begin());
    else std::fill(t.storage().begin(), t.storage().end(), T{0});
  });
  return g;
}

template <typename T>
struct EncoderOutput {
  Var<T> cls;      // [num_seq, d]
  Var<T> patches;  // [num_seq * n_tokens, d]
  std::size_t num_seq = 0;
  std::size_t tokens_per_seq = 0;
};

struct ForwardOptions {
  // Flat indices into the [num_seq * n_tokens] patch rows to replace by the mask token.
  std::vector<std::size_t> masked_rows;
  // Drop-path randomness; ignored when the configured rate is 0.
  Rng* drop_path_rng = nullptr;
};

template <typename T>
Var<T> apply_mask_tokens(const Var<T>& tokens, const std::vector<std::size_t>& indices, const Var<T>& mask_token) {
  if (indices.empty()) return tokens;
  return replace_rows(tokens, indices, mask_token);
}

// Encodes num_seq views sharing one grid x grid token layout.
// patches: [num_seq * grid*grid, patch_dim].
template <typename T>
EncoderOutput<T> encoder_forward(const BoundParams<T>& p, const ModelConfig& cfg, const Tensor<T>& patches,
                                 std::size_t num_seq, std::size_t grid, const ForwardOptions& opts = {}) {
  const std::size_t n = grid * grid;
  if (num_seq == 0 || patches.rows() != num_seq * n || patches.cols() != cfg.patch_dim())
    throw DimensionError("encoder_forward: patches " + shape_str(patches.shape()) + " do not match " +
                         std::to_string(num_seq) + " sequences of " + std::to_string(n) + " tokens");
  auto x = linear(Var<T>::constant(patches), p.patch_weight, p.patch_bias);
  x = apply_mask_tokens(x, opts.masked_rows, p.mask_token);
  x = assemble_sequences(x, p.cls_token, positional_embedding(p.pos_embed, cfg.grid(), grid), num_seq);

  const bool drop = cfg.drop_path_rate > 0.0 && opts.drop_path_rng != nullptr;
  auto residual = [&](const Var<T>& branch, std::size_t block) {
    if (!drop) return branch;
    const double rate = cfg.drop_path_rate * static_cast<double>(block + 1) / static_cast<double>(cfg.depth);
    std::vector<T> f(num_seq);
    for (auto& v : f) v = opts.drop_path_rng->bernoulli(rate) ? T{0} : static_cast<T>(1.0 / (1.0 - rate));
    return scale_sequences(branch, std::move(f));
  };

  for (std::size_t bi = 0; bi < p.blocks.size(); ++bi) {
    const auto& b = p.blocks[bi];
    auto h = layer_norm(x, b.ln1_gamma, b.ln1_beta);
    auto attn = multi_head_attention(linear(h, b.qkv_weight, b.qkv_bias), num_seq, cfg.num_heads);
    x = add(x, residual(linear(attn, b.proj_weight, b.proj_bias), bi));
    h = layer_norm(x, b.ln2_gamma, b.ln2_beta);
    auto mlp = linear(gelu(linear(h, b.fc1_weight, b.fc1_bias)), b.fc2_weight, b.fc2_bias);
    x = add(x, residual(mlp, bi));
  }
  x = layer_norm(x, p.norm_gamma, p.norm_beta);
  if (!x.value().all_finite()) throw NumericError("non-finite activation in encoder output");

  std::vector<std::size_t> cls_rows(num_seq), patch_rows;
  patch_rows.reserve(num_seq * n);
  for (std::size_t s = 0; s < num_seq; ++s) {
    cls_rows[s] = s * (n + 1);
    for (std::size_t t = 0; t < n; ++t) patch_rows.push_back(s * (n + 1) + 1 + t);
  }
  return {gather_rows(x, std::move(cls_rows)), gather_rows(x, std::move(patch_rows)), num_seq, n};
}

// MLP -> L2 normalize -> prototype dot products. No output bias.
template <typename T>
Var<T> head_forward(const BoundParams<T>& p, const Var<T>& features) {
  auto z = gelu(linear(features, p.head_fc1_weight, p.head_fc1_bias));
  z = gelu(linear(z, p.head_fc2_weight, p.head_fc2_bias));
  z = linear(z, p.head_fc3_weight, p.head_fc3_bias);
  return matmul_nt(l2_normalize(z), p.prototypes);
}

}  // namespace jea
