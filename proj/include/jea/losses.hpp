#pragma once

#include <cmath>
#include <vector>

#include "jea/augment.hpp"
#include "jea/autodiff.hpp"

namespace jea {

// softmax((logits - center) / tau) per row.
template <typename T>
Tensor<T> teacher_distribution(const Tensor<T>& logits, const Tensor<T>& center, T tau) {
  const std::size_t c = logits.cols();
  if (center.size() != c) throw DimensionError("teacher_distribution: center size mismatch");
  Tensor<T> shifted = logits;
  for (std::size_t i = 0; i < shifted.size(); ++i) shifted[i] -= center[i % c];
  return softmax_values(shifted, tau);
}

template <typename T>
T mean_row_entropy(const Tensor<T>& probs) {
  if (probs.rows() == 0) return T{0};
  T acc{0};
  for (std::size_t i = 0; i < probs.rows(); ++i) acc += row_entropy(probs.row(i));
  return acc / static_cast<T>(probs.rows());
}

namespace detail {
template <typename T>
void require_no_grad(const Var<T>& v, const char* what) {
  if (v.requires_grad()) throw ContractError(std::string(what) + ": teacher input carries a gradient");
}
}  // namespace detail

// Cross-view distillation loss. student_views[j] and teacher_globals[i] are
// [batch, prototypes]; the first teacher_globals.size() student views are the
// same global crops the teacher saw. Averages CE(p_t[i], q_s[j]) over all
// pairs with j != i.
template <typename T>
Var<T> dino_loss(const std::vector<Var<T>>& student_views, const std::vector<Var<T>>& teacher_globals,
                 const Tensor<T>& center, T tau_student, T tau_teacher) {
  if (teacher_globals.empty() || student_views.size() < teacher_globals.size())
    throw DimensionError("dino_loss: need at least as many student views as teacher globals");
  std::vector<Tensor<T>> targets;
  for (const auto& t : teacher_globals) {
    detail::require_no_grad(t, "dino_loss");
    targets.push_back(teacher_distribution(t.value(), center, tau_teacher));
  }
  Var<T> total;
  std::size_t pairs = 0;
  for (std::size_t j = 0; j < student_views.size(); ++j) {
    const auto log_q = log_softmax(student_views[j], tau_student);
    for (std::size_t i = 0; i < targets.size(); ++i) {
      if (i == j) continue;
      auto term = cross_entropy_soft(targets[i], log_q);
      total = total.defined() ? add(total, term) : term;
      ++pairs;
    }
  }
  return scale(total, T{1} / static_cast<T>(pairs));
}

inline std::size_t dino_pair_count(std::size_t n_teacher_globals, std::size_t n_student_views) {
  return n_teacher_globals * n_student_views - std::min(n_teacher_globals, n_student_views);
}

// Masked latent prediction loss on pre-gathered rows. Rows are grouped by
// view: `counts[v]` consecutive rows belong to view v. Each view's loss is the
// mean over its masked positions; views are then averaged. Views with no
// masked position are skipped; returns 0 when every view is empty.
template <typename T>
Var<T> ibot_loss_rows(const Var<T>& student_rows, const Var<T>& teacher_rows, const std::vector<std::size_t>& counts,
                      const Tensor<T>& center, T tau_student, T tau_teacher) {
  detail::require_no_grad(teacher_rows, "ibot_loss");
  std::size_t total_rows = 0, active = 0;
  for (auto c : counts) {
    total_rows += c;
    active += c > 0;
  }
  if (student_rows.rows() != total_rows || teacher_rows.rows() != total_rows)
    throw DimensionError("ibot_loss: row counts do not match mask plans");
  if (active == 0) return Var<T>::constant(Tensor<T>(Shape{}, T{0}));
  const Tensor<T> targets = teacher_distribution(teacher_rows.value(), center, tau_teacher);
  const auto log_q = log_softmax(student_rows, tau_student);
  const bool uniform = std::all_of(counts.begin(), counts.end(), [&](std::size_t c) { return c == counts[0]; });
  if (uniform) return cross_entropy_soft(targets, log_q);
  Var<T> total;
  std::size_t off = 0;
  const std::size_t P = targets.cols();
  for (auto c : counts) {
    if (c == 0) continue;
    Tensor<T> tv({c, P});
    std::copy_n(targets.data().begin() + off * P, c * P, tv.data().begin());
    auto term = cross_entropy_soft(tv, slice_rows(log_q, off, c));
    total = total.defined() ? add(total, term) : term;
    off += c;
  }
  return scale(total, T{1} / static_cast<T>(active));
}

// Full-view form: logits are [num_views * n_tokens, P]; plans[v] selects the
// masked positions of view v.
template <typename T>
Var<T> ibot_loss(const Var<T>& student_patch_logits, const Var<T>& teacher_patch_logits,
                 const std::vector<MaskPlan>& plans, const Tensor<T>& center, T tau_student, T tau_teacher) {
  detail::require_no_grad(teacher_patch_logits, "ibot_loss");
  if (plans.empty()) return Var<T>::constant(Tensor<T>(Shape{}, T{0}));
  const std::size_t n = plans[0].num_tokens();
  if (student_patch_logits.rows() != plans.size() * n || teacher_patch_logits.rows() != plans.size() * n)
    throw DimensionError("ibot_loss: logits rows do not match plans");
  std::vector<std::size_t> rows, counts;
  for (std::size_t v = 0; v < plans.size(); ++v) {
    if (plans[v].num_tokens() != n) throw PlanError("ibot_loss: plans cover different grids");
    for (auto i : plans[v].indices) {
      if (i >= n) throw PlanError("ibot_loss: plan index out of range");
      rows.push_back(v * n + i);
    }
    counts.push_back(plans[v].indices.size());
  }
  if (rows.empty()) return Var<T>::constant(Tensor<T>(Shape{}, T{0}));
  return ibot_loss_rows(gather_rows(student_patch_logits, rows), gather_rows(teacher_patch_logits, rows), counts,
                        center, tau_student, tau_teacher);
}

// center' = momentum * center + (1 - momentum) * mean over rows of logits.
template <typename T>
Tensor<T> update_center(const Tensor<T>& center, const Tensor<T>& teacher_logits, T momentum) {
  if (!(momentum >= T{0} && momentum <= T{1})) throw ParameterError("center momentum must be in [0,1]");
  const std::size_t c = center.size();
  if (teacher_logits.cols() != c) throw DimensionError("update_center: width mismatch");
  const std::size_t r = teacher_logits.rows();
  if (r == 0) return center;
  std::vector<double> mean(c, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) mean[j] += static_cast<double>(teacher_logits[i * c + j]);
  Tensor<T> out(center.shape());
  for (std::size_t j = 0; j < c; ++j)
    out[j] = momentum * center[j] + (T{1} - momentum) * static_cast<T>(mean[j] / static_cast<double>(r));
  return out;
}

struct CollapseReport {
  double mean_entropy = 0.0;
  double prototype_usage = 0.0;  // distinct argmax prototypes / num prototypes
  double feature_std = 0.0;      // mean over dims of the batch std
  double entropy_threshold = 0.0;
  bool collapsed = false;
};

// teacher_probs: [rows, P] teacher distributions. features: optional
// [rows, d]; the distributions themselves are used when absent.
template <typename T>
CollapseReport collapse_metrics(const Tensor<T>& teacher_probs, const Tensor<T>* features = nullptr,
                                double threshold_fraction = 0.1) {
  CollapseReport rep;
  const std::size_t r = teacher_probs.rows(), P = teacher_probs.cols();
  rep.entropy_threshold = threshold_fraction * std::log(static_cast<double>(P));
  if (r == 0) return rep;
  rep.mean_entropy = static_cast<double>(mean_row_entropy(teacher_probs));
  std::vector<char> used(P, 0);
  for (std::size_t i = 0; i < r; ++i) {
    auto row = teacher_probs.row(i);
    used[static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin())] = 1;
  }
  rep.prototype_usage = static_cast<double>(std::count(used.begin(), used.end(), 1)) / static_cast<double>(P);
  const Tensor<T>& f = features ? *features : teacher_probs;
  const std::size_t d = f.cols();
  double acc = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    double m = 0.0, s = 0.0;
    for (std::size_t i = 0; i < f.rows(); ++i) m += static_cast<double>(f[i * d + j]);
    m /= static_cast<double>(f.rows());
    for (std::size_t i = 0; i < f.rows(); ++i) s += std::pow(static_cast<double>(f[i * d + j]) - m, 2);
    acc += std::sqrt(s / static_cast<double>(f.rows()));
  }
  rep.feature_std = acc / static_cast<double>(d);
  rep.collapsed = rep.mean_entropy < rep.entropy_threshold;
  return rep;
}

}  // namespace jea
