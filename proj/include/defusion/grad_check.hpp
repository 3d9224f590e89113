#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "defusion/common.hpp"
#include "defusion/params.hpp"
#include "defusion/tensor.hpp"

namespace defusion {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
};

/// Compares reverse-mode gradients against central finite differences.
///
/// `loss_fn` must build a fresh scalar graph from the current parameter
/// values on every call and be deterministic; the checker evaluates it twice
/// up front and rejects the function if the two values differ bitwise.
/// Runs in double precision only. Returns the maximum over all parameter
/// elements of |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
template <class LossFn>
GradCheckReport grad_check(LossFn&& loss_fn, ParamList<double>& params,
                           double h = 1e-5) {
  {
    const double a = loss_fn().item();
    const double b = loss_fn().item();
    if (a != b)
      throw ValueError(strcat_msg(
          "grad_check: loss function is not deterministic (", a, " vs ", b,
          ")"));
  }

  zero_grads(params);
  auto loss = loss_fn();
  backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.push_back(p.tensor.grad());

  GradCheckReport report;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& data = params[pi].tensor.data();
    for (size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      const double plus = loss_fn().item();
      data[i] = saved - h;
      const double minus = loss_fn().item();
      data[i] = saved;
      const double numeric = (plus - minus) / (2.0 * h);
      const double a = analytic[pi][i];
      const double rel =
          std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = params[pi].name;
      }
    }
  }
  return report;
}

}  // namespace defusion
