#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "spm/autodiff.hpp"

namespace spm {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-6;
  // Denominator floor: err = |fd - ad| / max(|fd|, |ad|, floor).
  double floor = 1e-3;
};

struct TensorGradReport {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double numeric_at_worst = 0.0;
  double analytic_at_worst = 0.0;
};

struct GradCheckReport {
  std::vector<TensorGradReport> tensors;
  double max_rel_error = 0.0;
  bool passed = true;

  const TensorGradReport* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

inline double grad_relative_error(double numeric, double analytic, double floor) {
  const double denom = std::max({std::abs(numeric), std::abs(analytic), floor});
  return std::abs(numeric - analytic) / denom;
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences for every entry of every tensor in `params`.
inline GradCheckReport check_gradients(const std::function<Var()>& f, ParamStore& params, const GradCheckOptions& opts = {}) {
  if (!(opts.step >= 1e-6 && opts.step <= 1e-4)) throw DomainError("check_gradients: step must lie in [1e-6, 1e-4]");

  auto eval = [&f]() {
    NoGradGuard guard;
    Var out = f();
    if (out.size() != 1) throw DimensionError("check_gradients: f must return a single element");
    return out.value()[0];
  };

  const double f0 = eval();
  const double f1 = eval();
  if (std::memcmp(&f0, &f1, sizeof(double)) != 0) {
    throw NonDeterminismError("check_gradients: two forward passes at the same point differ");
  }

  params.zero_grad();
  backward(f());

  GradCheckReport report;
  for (auto& [name, var] : params.entries()) {
    Tensor analytic = var.has_grad() ? var.grad() : Tensor(var.shape());
    TensorGradReport tr;
    tr.name = name;
    Var v = var;
    Tensor& value = v.mutable_value();
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double orig = value[i];
      value[i] = orig + opts.step;
      const double fp = eval();
      value[i] = orig - opts.step;
      const double fm = eval();
      value[i] = orig;
      const double numeric = (fp - fm) / (2.0 * opts.step);
      const double err = grad_relative_error(numeric, analytic[i], opts.floor);
      if (i == 0 || err > tr.max_rel_error) {
        tr.max_rel_error = err;
        tr.worst_index = i;
        tr.numeric_at_worst = numeric;
        tr.analytic_at_worst = analytic[i];
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, tr.max_rel_error);
    report.tensors.push_back(tr);
  }
  report.passed = report.max_rel_error < opts.tolerance;
  params.zero_grad();
  return report;
}

}  // namespace spm
