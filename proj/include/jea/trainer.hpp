#pragma once

#include <chrono>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "jea/augment.hpp"
#include "jea/datasets.hpp"
#include "jea/losses.hpp"
#include "jea/vit.hpp"

namespace jea {

struct TrainConfig {
  std::size_t batch_size = 128;
  std::size_t total_steps = 5000;
  double lr = 1e-3;
  std::size_t warmup_steps = 500;
  double min_lr = 1e-6;
  double weight_decay = 0.04;
  double weight_decay_end = 0.04;
  double teacher_temp_start = 0.04;
  double teacher_temp_end = 0.07;
  std::size_t teacher_temp_warmup_steps = 500;
  double student_temp = 0.1;
  double center_momentum = 0.9;
  double ema_start = 0.99;
  double ibot_weight = 1.0;
  double mask_ratio = 0.3;
  double clip_grad = 3.0;  // global norm; 0 disables
  std::size_t freeze_prototypes_steps = 0;  // prototype rows get no update before this step
  bool unit_prototypes = false;             // rescale student prototype rows to unit norm after each update
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
    if (!(student_temp > 0.0 && teacher_temp_start > 0.0 && teacher_temp_end > 0.0))
      throw ConfigError("train: temperatures must be positive");
    auto unit = [](double m) { return m >= 0.0 && m <= 1.0; };
    if (!unit(center_momentum) || !unit(ema_start) || !unit(beta1) || !unit(beta2))
      throw ConfigError("train: momenta must lie in [0,1]");
    if (ibot_weight < 0.0) throw ConfigError("train: ibot_weight must be non-negative");
    if (!unit(mask_ratio)) throw ConfigError("train: mask_ratio must lie in [0,1]");
    if (lr < 0.0 || min_lr < 0.0 || weight_decay < 0.0 || weight_decay_end < 0.0 || clip_grad < 0.0)
      throw ConfigError("train: lr, weight decay and clip_grad must be non-negative");
  }
};

struct Schedule {
  double lr = 0.0;
  double weight_decay = 0.0;
  double tau_t = 0.0;
  double ema_m = 0.0;
};

// Linear warmup then cosine to min_lr; weight decay cosine from start to end;
// teacher temperature linear over its warmup then flat; EMA momentum cosine
// from ema_start to 1.
inline Schedule schedules(std::size_t step, const TrainConfig& c) {
  if (step > c.total_steps)
    throw HarnessError("schedule step " + std::to_string(step) + " outside [0, " + std::to_string(c.total_steps) + "]");
  const double pi = std::numbers::pi;
  const auto s = static_cast<double>(step);
  const auto total = static_cast<double>(c.total_steps);
  Schedule out;
  if (step < c.warmup_steps) {
    out.lr = c.lr * s / static_cast<double>(c.warmup_steps);
  } else {
    const double span = std::max(1.0, total - static_cast<double>(c.warmup_steps));
    const double t = std::min(1.0, (s - static_cast<double>(c.warmup_steps)) / span);
    out.lr = c.min_lr + (c.lr - c.min_lr) * 0.5 * (1.0 + std::cos(pi * t));
  }
  const double frac = c.total_steps == 0 ? 1.0 : s / total;
  out.weight_decay = c.weight_decay_end + (c.weight_decay - c.weight_decay_end) * 0.5 * (1.0 + std::cos(pi * frac));
  if (step < c.teacher_temp_warmup_steps)
    out.tau_t = c.teacher_temp_start + (c.teacher_temp_end - c.teacher_temp_start) * s /
                                           static_cast<double>(c.teacher_temp_warmup_steps);
  else
    out.tau_t = c.teacher_temp_end;
  out.ema_m = step == c.total_steps ? 1.0 : 1.0 - (1.0 - c.ema_start) * 0.5 * (1.0 + std::cos(pi * frac));
  return out;
}

// teacher <- m * teacher + (1 - m) * student, parameter by parameter.
template <typename T>
void ema_update(ModelParams<T>& teacher, const ModelParams<T>& student, double m) {
  if (!(m >= 0.0 && m <= 1.0)) throw ParameterError("ema momentum must be in [0,1]");
  std::vector<const Tensor<T>*> src;
  student.visit([&](const std::string&, const Tensor<T>& t) { src.push_back(&t); });
  std::size_t i = 0;
  const T mt = static_cast<T>(m), ms = static_cast<T>(1.0 - m);
  teacher.visit([&](const std::string& name, Tensor<T>& t) {
    if (i >= src.size() || src[i]->shape() != t.shape())
      throw CorruptionError("ema_update: teacher/student shape mismatch at " + name);
    const auto s = src[i++]->data();
    auto d = t.data();
    if (m == 1.0) return;
    if (m == 0.0) {
      std::copy(s.begin(), s.end(), d.begin());
      return;
    }
    for (std::size_t k = 0; k < d.size(); ++k) d[k] = mt * d[k] + ms * s[k];
  });
  if (i != src.size()) throw CorruptionError("ema_update: parameter count mismatch");
}

struct TrainState {
  ModelParams<float> student;
  ModelParams<float> teacher;
  Tensor<float> dino_center;
  Tensor<float> ibot_center;
  ModelParams<float> adam_m;
  ModelParams<float> adam_v;
  std::size_t step = 0;

  const ModelConfig& model() const { return student.config; }
};

// Student and teacher start identical.
inline TrainState init_train_state(const ModelConfig& cfg, std::uint64_t seed) {
  TrainState st;
  st.student = init_params<float>(cfg, derive_seed(seed, stream_tag::init));
  st.teacher = st.student;
  st.dino_center = Tensor<float>({cfg.num_prototypes});
  st.ibot_center = Tensor<float>({cfg.num_prototypes});
  st.adam_m = ModelParams<float>::shaped_like(cfg);
  st.adam_v = ModelParams<float>::shaped_like(cfg);
  auto zero = [](const std::string&, Tensor<float>& t) { std::fill(t.storage().begin(), t.storage().end(), 0.0f); };
  st.adam_m.visit(zero);
  st.adam_v.visit(zero);
  return st;
}

struct TrainBatch {
  std::vector<std::size_t> sample_ids;
  std::vector<ViewSet> views;
  std::vector<std::vector<MaskPlan>> masks;  // [sample][global view]
};

// Every random draw is keyed by (seed, step, slot in batch), so a batch can be
// rebuilt for any step without replaying earlier ones. Mask plans use their
// own stream and never perturb the view streams.
inline TrainBatch make_batch(const Dataset& ds, const std::vector<std::size_t>& ids, const AugmentationConfig& aug,
                             const ModelConfig& model, const TrainConfig& tc, std::size_t step) {
  TrainBatch b;
  b.sample_ids = ids;
  const std::size_t grid = aug.global_size / model.patch_size;
  for (std::size_t k = 0; k < ids.size(); ++k) {
    Rng geo(derive_seed(tc.seed, stream_tag::geometric, step, k));
    Rng photo(derive_seed(tc.seed, stream_tag::photometric, step, k));
    Rng mask(derive_seed(tc.seed, stream_tag::mask, step, k));
    b.views.push_back(generate_views(ds.image(ids[k]), aug, geo, photo));
    std::vector<MaskPlan> plans;
    for (std::size_t g = 0; g < aug.n_global; ++g) plans.push_back(sample_mask_plan(mask, tc.mask_ratio, grid, grid));
    b.masks.push_back(std::move(plans));
  }
  return b;
}

struct StepMetrics {
  std::size_t step = 0;
  double lr = 0.0;
  double tau_t = 0.0;
  double ema_m = 0.0;
  double dino_loss = 0.0;
  double ibot_loss = 0.0;
  double teacher_entropy = 0.0;
  double grad_norm = 0.0;
  double wallclock_s = 0.0;
  bool collapsed = false;

  // Every field except wallclock; used for bit-exact comparisons.
  bool same_numbers(const StepMetrics& o) const {
    return step == o.step && lr == o.lr && tau_t == o.tau_t && ema_m == o.ema_m && dino_loss == o.dino_loss &&
           ibot_loss == o.ibot_loss && teacher_entropy == o.teacher_entropy && grad_norm == o.grad_norm &&
           collapsed == o.collapsed;
  }
};

inline void write_metrics_header(std::ostream& os) {
  os << "step,lr,tau_t,ema_m,dino_loss,ibot_loss,teacher_entropy,grad_norm,wallclock_s,collapsed\n";
}

inline void write_metrics_row(std::ostream& os, const StepMetrics& m) {
  const auto flags = os.flags();
  const auto prec = os.precision();
  os << std::setprecision(17) << m.step << ',' << m.lr << ',' << m.tau_t << ',' << m.ema_m << ',' << m.dino_loss
     << ',' << m.ibot_loss << ',' << m.teacher_entropy << ',' << m.grad_norm << ',' << std::setprecision(6)
     << m.wallclock_s << ',' << (m.collapsed ? 1 : 0) << '\n';
  os.flags(flags);
  os.precision(prec);
}

namespace detail {

// Stacks same-size views, view-major: row block (v * B + b) holds view v of sample b.
inline Tensor<float> stack_patches(const TrainBatch& batch, bool global, std::size_t patch) {
  const std::size_t B = batch.views.size();
  const auto& first = global ? batch.views[0].global_views : batch.views[0].local_views;
  const std::size_t V = first.size();
  if (V == 0) return {};
  const Image& ref = first[0];
  const std::size_t n = (ref.height / patch) * (ref.width / patch);
  const std::size_t pd = ref.channels * patch * patch;
  Tensor<float> out({V * B * n, pd}, uninitialized);
  for (std::size_t v = 0; v < V; ++v)
    for (std::size_t b = 0; b < B; ++b) {
      const auto& views = global ? batch.views[b].global_views : batch.views[b].local_views;
      if (views.size() != V) throw DimensionError("train_step: samples carry different view counts");
      const Image& img = views[v];
      if (img.height != ref.height || img.width != ref.width)
        throw DimensionError("train_step: views of one kind differ in size");
      const auto t = input_patches<float>(img.pixels, img.channels, img.height, img.width, patch);
      std::copy(t.data().begin(), t.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>((v * B + b) * n * pd));
    }
  return out;
}

inline std::string batch_ids(const TrainBatch& b) {
  std::ostringstream os;
  for (std::size_t i = 0; i < b.sample_ids.size(); ++i) os << (i ? " " : "") << b.sample_ids[i];
  return os.str();
}

}  // namespace detail

// One step: forward teacher (no tape) and student, DINO + weighted iBOT loss,
// AdamW on the student, then center updates, then EMA into the teacher.
// The iBOT path (masking included) only runs when ibot_weight > 0.
inline StepMetrics train_step(TrainState& st, const TrainBatch& batch, const TrainConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  const ModelConfig& mc = st.model();
  const std::size_t B = batch.views.size();
  if (B == 0) throw ParameterError("train_step: empty batch");
  const std::size_t G = batch.views[0].global_views.size();
  const std::size_t L = batch.views[0].local_views.size();
  if (G < 2) throw DimensionError("train_step: need two global views");
  const Schedule sch = schedules(st.step, cfg);
  const auto tau_s = static_cast<float>(cfg.student_temp);
  const auto tau_t = static_cast<float>(sch.tau_t);

  const Tensor<float> gp = detail::stack_patches(batch, true, mc.patch_size);
  const Tensor<float> lp = detail::stack_patches(batch, false, mc.patch_size);
  const std::size_t g_grid = batch.views[0].global_views[0].height / mc.patch_size;
  const std::size_t g_tokens = g_grid * g_grid;

  std::vector<std::size_t> masked_rows, counts;
  if (cfg.ibot_weight > 0.0) {
    if (batch.masks.size() != B) throw PlanError("train_step: mask plans missing for some samples");
    for (std::size_t v = 0; v < G; ++v)
      for (std::size_t b = 0; b < B; ++b) {
        const MaskPlan& plan = batch.masks[b].at(v);
        if (!plan.empty() && plan.num_tokens() != g_tokens) throw PlanError("train_step: mask plan grid mismatch");
        for (auto i : plan.indices) masked_rows.push_back((v * B + b) * g_tokens + i);
        counts.push_back(plan.indices.size());
      }
  }
  const bool ibot = !masked_rows.empty();

  StepMetrics m;
  m.step = st.step;
  m.lr = sch.lr;
  m.tau_t = sch.tau_t;
  m.ema_m = sch.ema_m;

  try {
    const auto tb = bind(st.teacher, false);
    const auto te = encoder_forward(tb, mc, gp, G * B, g_grid);
    const auto t_cls = head_forward(tb, te.cls);
    Var<float> t_patch;
    if (ibot) t_patch = head_forward(tb, gather_rows(te.patches, masked_rows));

    auto sb = bind(st.student, true);
    Rng drop_rng(derive_seed(cfg.seed, stream_tag::drop_path, st.step));
    ForwardOptions gopt;
    gopt.drop_path_rng = &drop_rng;
    if (ibot) gopt.masked_rows = masked_rows;
    const auto sg = encoder_forward(sb, mc, gp, G * B, g_grid, gopt);
    std::vector<Var<float>> head_in{sg.cls};
    if (L > 0) {
      ForwardOptions lopt;
      lopt.drop_path_rng = &drop_rng;
      const std::size_t l_grid = batch.views[0].local_views[0].height / mc.patch_size;
      head_in.push_back(encoder_forward(sb, mc, lp, L * B, l_grid, lopt).cls);
    }
    if (ibot) head_in.push_back(gather_rows(sg.patches, masked_rows));
    const auto s_out = head_forward(sb, concat_rows(head_in));

    std::vector<Var<float>> s_views, t_views;
    for (std::size_t v = 0; v < G + L; ++v) s_views.push_back(slice_rows(s_out, v * B, B));
    for (std::size_t v = 0; v < G; ++v) t_views.push_back(slice_rows(t_cls, v * B, B));
    const auto dl = dino_loss(s_views, t_views, st.dino_center, tau_s, tau_t);
    Var<float> total = dl;
    m.dino_loss = dl.item();
    if (ibot) {
      const auto il = ibot_loss_rows(slice_rows(s_out, (G + L) * B, masked_rows.size()), t_patch, counts,
                                     st.ibot_center, tau_s, tau_t);
      m.ibot_loss = il.item();
      total = add(dl, scale(il, static_cast<float>(cfg.ibot_weight)));
    }
    if (!std::isfinite(total.item()))
      throw NumericError("non-finite loss at step " + std::to_string(st.step) + " (lr " + std::to_string(sch.lr) +
                         ", batch ids " + detail::batch_ids(batch) + ")");

    const auto probs = teacher_distribution(t_cls.value(), st.dino_center, tau_t);
    const auto collapse = collapse_metrics(probs);
    m.teacher_entropy = collapse.mean_entropy;
    m.collapsed = collapse.collapsed;

    total.backward();

    // Gradients in parameter visit order.
    std::vector<std::span<const float>> grads;
    sb.visit([&](const std::string&, const Var<float>& v) {
      if (v.value().has_grad()) grads.push_back(v.grad());
      else grads.push_back({});
    });
    double sq = 0.0;
    for (const auto& g : grads)
      for (float x : g) sq += static_cast<double>(x) * static_cast<double>(x);
    m.grad_norm = std::sqrt(sq);
    if (!std::isfinite(m.grad_norm))
      throw NumericError("non-finite gradient at step " + std::to_string(st.step) + " (batch ids " +
                         detail::batch_ids(batch) + ")");
    const double clip = cfg.clip_grad > 0.0 ? std::min(1.0, cfg.clip_grad / (m.grad_norm + 1e-6)) : 1.0;

    // AdamW with decoupled decay on weight matrices.
    const double t = static_cast<double>(st.step + 1);
    const auto bc1 = static_cast<float>(1.0 - std::pow(cfg.beta1, t));
    const auto bc2 = static_cast<float>(1.0 - std::pow(cfg.beta2, t));
    const auto b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
    const auto eps = static_cast<float>(cfg.adam_eps), lr = static_cast<float>(sch.lr);
    const auto wd = static_cast<float>(sch.weight_decay), cf = static_cast<float>(clip);
    std::vector<Tensor<float>*> ms, vs;
    st.adam_m.visit([&](const std::string&, Tensor<float>& x) { ms.push_back(&x); });
    st.adam_v.visit([&](const std::string&, Tensor<float>& x) { vs.push_back(&x); });
    std::size_t pi = 0;
    st.student.visit([&](const std::string& name, Tensor<float>& p) {
      const auto g = grads[pi];
      auto mm = ms[pi]->data();
      auto vv = vs[pi]->data();
      ++pi;
      if (st.step < cfg.freeze_prototypes_steps && name == "head.prototypes") return;
      const float decay = is_decayed_param(name) ? wd : 0.0f;
      auto pd = p.data();
      for (std::size_t k = 0; k < pd.size(); ++k) {
        const float gk = g.empty() ? 0.0f : g[k] * cf;
        mm[k] = b1 * mm[k] + (1.0f - b1) * gk;
        vv[k] = b2 * vv[k] + (1.0f - b2) * gk * gk;
        const float upd = (mm[k] / bc1) / (std::sqrt(vv[k] / bc2) + eps);
        pd[k] -= lr * (upd + decay * pd[k]);
      }
    });

    if (cfg.unit_prototypes) {
      auto& P = st.student.prototypes;
      for (std::size_t k = 0; k < P.rows(); ++k) {
        auto row = P.row(k);
        double n2 = 0.0;
        for (float v : row) n2 += static_cast<double>(v) * v;
        const auto inv = static_cast<float>(1.0 / std::max(std::sqrt(n2), 1e-12));
        for (auto& v : row) v *= inv;
      }
    }
    const auto cm = static_cast<float>(cfg.center_momentum);
    st.dino_center = update_center(st.dino_center, t_cls.value(), cm);
    if (ibot) st.ibot_center = update_center(st.ibot_center, t_patch.value(), cm);
    ema_update(st.teacher, st.student, sch.ema_m);
  } catch (const NumericError& e) {
    const std::string what = e.what();
    if (what.find("at step") != std::string::npos) throw;
    throw NumericError(what + " at step " + std::to_string(st.step) + " (batch ids " + detail::batch_ids(batch) + ")");
  }
  ++st.step;
  m.wallclock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return m;
}

}  // namespace jea
