#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "flare/autodiff.hpp"
#include "flare/errors.hpp"
#include "flare/tensor.hpp"

namespace flare {

// Builds a scalar on the given tape from the parameter leaves.
using ScalarFn = std::function<Var<double>(Tape<double>&, std::span<const Var<double>>)>;

struct GradCheckReport {
  double max_rel_error = 0;
  std::size_t worst_param = 0;
  std::size_t worst_entry = 0;
  double analytic = 0;
  double numeric = 0;
};

namespace detail {

inline double evaluate_scalar(const ScalarFn& f, const std::vector<Tensor<double>>& params) {
  Tape<double> tape;
  std::vector<Var<double>> leaves;
  leaves.reserve(params.size());
  for (const auto& p : params) leaves.push_back(tape.constant(p));
  const double v = f(tape, leaves).value()[0];
  if (!std::isfinite(v)) throw InvalidValueError("grad_check: f evaluated to a non-finite value");
  return v;
}

}  // namespace detail

// Compares tape gradients against central differences entry by entry.
// Relative error is |a − c| / max(|a|, |c|, 1e-8).
inline GradCheckReport grad_check(const ScalarFn& f, std::vector<Tensor<double>> params,
                                  double h = 1e-6) {
  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    for (const auto& p : params) leaves.push_back(tape.leaf(p));
    Var<double> out = f(tape, leaves);
    if (out.value().size() != 1) throw DimensionError("grad_check: f must return a scalar");
    if (!std::isfinite(out.value()[0])) {
      throw InvalidValueError("grad_check: f evaluated to a non-finite value");
    }
    tape.backward(out);
    for (const auto& l : leaves) analytic.push_back(tape.grad(l));
  }

  GradCheckReport report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      const double saved = params[p][i];
      params[p][i] = saved + h;
      const double fp = detail::evaluate_scalar(f, params);
      params[p][i] = saved - h;
      const double fm = detail::evaluate_scalar(f, params);
      params[p][i] = saved;

      const double numeric = (fp - fm) / (2 * h);
      const double a = analytic[p][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > report.max_rel_error || (p == 0 && i == 0)) {
        report = {rel, p, i, a, numeric};
      }
    }
  }
  return report;
}

}  // namespace flare
