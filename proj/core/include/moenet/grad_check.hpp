#pragma once

// Central finite-difference verification of reverse-mode gradients. Runs in
// double precision; callers pass any scalar-valued function of one tensor.

#include <cmath>
#include <functional>

#include "moenet/tensor.hpp"

namespace moenet {

struct GradCheckReport {
  double max_rel_err = 0.0;
  long worst_index = -1;
  double tol = 0.0;
  bool passed = false;
};

// Max over coordinates of |analytic - central| / max(1, |central|).
// f is evaluated at x +- h*e_j for every coordinate, so it must be a pure
// function of the tensor values.
template <typename F>
GradCheckReport finite_difference_check(F&& f, Tensor<double>& x, double h,
                                        double tol) {
  if (h <= 0.0) throw std::invalid_argument("finite_difference_check: h must be > 0");

  const bool prev_rg = x.requires_grad();
  x.set_requires_grad(true);
  x.zero_grad();
  Tensor<double> out = f(static_cast<const Tensor<double>&>(x));
  if (out.numel() != 1)
    throw std::invalid_argument("finite_difference_check: f must be scalar-valued");
  if (!std::isfinite(out.item()))
    throw NumericalError("finite_difference_check: non-finite function value");
  out.backward();

  std::vector<double> analytic(static_cast<size_t>(x.numel()), 0.0);
  if (x.has_grad()) {
    auto g = x.grad();
    analytic.assign(g.begin(), g.end());
  }

  // Forward-only FD sweeps; no graph bookkeeping needed.
  x.set_requires_grad(false);
  GradCheckReport report;
  report.tol = tol;
  auto vals = x.mutable_values();
  for (long j = 0; j < x.numel(); ++j) {
    const double orig = vals[j];
    vals[j] = orig + h;
    const double fp = f(static_cast<const Tensor<double>&>(x)).item();
    vals[j] = orig - h;
    const double fm = f(static_cast<const Tensor<double>&>(x)).item();
    vals[j] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericalError("finite_difference_check: non-finite function value");
    const double central = (fp - fm) / (2.0 * h);
    const double err =
        std::abs(analytic[j] - central) / std::max(1.0, std::abs(central));
    if (err > report.max_rel_err) {
      report.max_rel_err = err;
      report.worst_index = j;
    }
  }
  x.set_requires_grad(prev_rg);
  report.passed = report.max_rel_err <= tol;
  return report;
}

}  // namespace moenet
