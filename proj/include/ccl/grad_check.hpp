#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "ccl/tensor.hpp"

namespace ccl {

struct GradCheckParam {
  std::string name;
  double max_rel_err = 0.0;
  size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckParam> params;

  double max_rel_err() const {
    double worst = 0.0;
    for (const auto& p : params) worst = std::max(worst, p.max_rel_err);
    return worst;
  }
};

namespace detail {
inline double rel_err(double analytic, double numeric) {
  const double denom =
      std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}
}  // namespace detail

// Compares analytic gradients of f against central differences
// (f(x+eps) - f(x-eps)) / (2 eps), element by element, for each parameter.
// f must rebuild its computation from the live parameter tensors on every
// call and return a scalar. Two baseline evaluations guard determinism.
inline GradCheckReport grad_check(
    const std::function<Tensor()>& f,
    const std::vector<std::pair<std::string, Tensor>>& params, double eps) {
  if (eps <= 0.0) throw InvalidArgumentError("grad_check: eps must be positive");

  const double base1 = f().value();
  const double base2 = f().value();
  if (base1 != base2)
    throw DeterminismError("grad_check: f returned different values for identical inputs");

  // Analytic pass.
  std::vector<std::vector<double>> analytic;
  {
    for (auto& [name, t] : params) const_cast<Tensor&>(t).zero_grad();
    Tape tape;
    Tensor loss = f();
    backward(loss);
    for (const auto& [name, t] : params) {
      if (t.has_grad()) {
        auto g = t.grad();
        analytic.emplace_back(g.begin(), g.end());
      } else {
        analytic.emplace_back(t.numel(), 0.0);
      }
    }
    for (auto& [name, t] : params) const_cast<Tensor&>(t).zero_grad();
  }

  GradCheckReport report;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    GradCheckParam entry;
    entry.name = params[pi].first;
    Tensor param = params[pi].second;
    auto values = param.mutable_data();
    for (size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double f_plus = f().value();
      values[i] = saved - eps;
      const double f_minus = f().value();
      values[i] = saved;
      const double numeric = (f_plus - f_minus) / (2.0 * eps);
      const double err = detail::rel_err(analytic[pi][i], numeric);
      if (err >= entry.max_rel_err) {
        entry.max_rel_err = err;
        entry.worst_index = i;
        entry.analytic_at_worst = analytic[pi][i];
        entry.numeric_at_worst = numeric;
      }
    }
    report.params.push_back(std::move(entry));
  }
  return report;
}

}  // namespace ccl
