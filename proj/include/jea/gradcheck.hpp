#pragma once

#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "jea/autodiff.hpp"
#include "jea/rng.hpp"

namespace jea {

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t coords_checked = 0;
  // Location of the worst coordinate.
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  bool passed = false;
};

struct GradCheckOptions {
  double h = 1e-4;
  double tol = 1e-4;
  // Coordinates sampled per parameter tensor; tensors at most this large are checked exhaustively.
  std::size_t max_coords_per_param = 24;
  // Gradients whose magnitude is below this are compared absolutely rather than relatively.
  // Central differences of an O(10) loss at h = 1e-5 carry ~1e-10 of roundoff,
  // so a true zero gradient needs a floor near 1e-5 to pass at tol 1e-4.
  double abs_floor = 1e-5;
  std::uint64_t seed = 0;
};

inline std::string fmt_g17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

using ScalarFn = std::function<Var<double>(const std::vector<Var<double>>&)>;

// Compares reverse-mode gradients of f against central differences
// (f(x+h) - f(x-h)) / 2h on a sampled subset of coordinates of every param.
// Relative error per coordinate is |a - n| / max(|a|, |n|, abs_floor).
inline GradCheckReport finite_diff_check(const ScalarFn& f, const std::vector<Tensor<double>>& params,
                                         const GradCheckOptions& opt = {}) {
  if (!(opt.h > 0.0)) throw ParameterError("finite_diff_check: h must be positive");

  auto evaluate = [&](const std::vector<Tensor<double>>& values) {
    std::vector<Var<double>> leaves;
    leaves.reserve(values.size());
    for (const auto& v : values) leaves.push_back(Var<double>::constant(v));
    return f(leaves).item();
  };

  std::vector<Var<double>> leaves;
  for (const auto& p : params) leaves.push_back(Var<double>::leaf(p, true));
  const Var<double> out = f(leaves);
  const double base = out.item();
  out.backward();
  // Taped and untaped forwards may round differently in the last bit; the
  // untaped path alone must be exactly repeatable.
  const double again = evaluate(params);
  if (evaluate(params) != again || std::abs(again - base) > 1e-12 * std::max(1.0, std::abs(base)))
    throw HarnessError("finite_diff_check: function is not deterministic (" + fmt_g17(base) + " vs " +
                       fmt_g17(again) + ")");

  GradCheckReport rep;
  Rng rng(opt.seed);
  std::vector<Tensor<double>> probe = params;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const std::size_t n = params[pi].size();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (n > opt.max_coords_per_param) {
      rng.shuffle(coords.begin(), coords.end());
      coords.resize(opt.max_coords_per_param);
    }
    const auto& g = leaves[pi].value();
    for (std::size_t idx : coords) {
      const double analytic = g.has_grad() ? g.grad()[idx] : 0.0;
      const double x0 = probe[pi][idx];
      probe[pi][idx] = x0 + opt.h;
      const double fp = evaluate(probe);
      probe[pi][idx] = x0 - opt.h;
      const double fm = evaluate(probe);
      probe[pi][idx] = x0;
      const double numeric = (fp - fm) / (2.0 * opt.h);
      const double abs_err = std::abs(analytic - numeric);
      const double rel = abs_err / std::max({std::abs(analytic), std::abs(numeric), opt.abs_floor});
      ++rep.coords_checked;
      rep.max_abs_error = std::max(rep.max_abs_error, abs_err);
      if (rel > rep.max_rel_error || rep.coords_checked == 1) {
        rep.max_rel_error = std::max(rep.max_rel_error, rel);
        rep.worst_param = pi;
        rep.worst_index = idx;
        rep.worst_analytic = analytic;
        rep.worst_numeric = numeric;
      }
    }
  }
  rep.passed = rep.max_rel_error <= opt.tol;
  return rep;
}

}  // namespace jea
