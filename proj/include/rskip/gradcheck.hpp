#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace rskip {

struct GradcheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;
  double tol = 0.0;
  bool passed = true;
};

/// |a - n| / max(1e-8, |a| + |n|)
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences (f(x+eps) - f(x-eps)) / (2 eps) for every coordinate of every
/// input. `f` is re-invoked for every probe so it must rebuild its graph.
inline GradcheckReport gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                                 std::vector<Tensor> inputs, double eps = 1e-5, double tol = 1e-4) {
  for (auto& in : inputs) {
    if (!in.is_leaf()) throw ContractError("gradcheck inputs must be leaf tensors");
    in.set_requires_grad(true);
    in.zero_grad();
  }
  Tensor out = f(inputs);
  if (out.size() != 1) throw ContractError("gradcheck needs a scalar-valued function, got " + to_string(out.shape()));
  out.backward();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& in : inputs) analytic.emplace_back(in.grad().begin(), in.grad().end());

  GradcheckReport report;
  report.tol = tol;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto values = inputs[k].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + eps;
      const double up = f(inputs).item();
      values[i] = orig - eps;
      const double down = f(inputs).item();
      values[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double err = relative_error(analytic[k][i], numeric);
      ++report.coordinates;
      if (!(err <= report.max_rel_error) || report.coordinates == 1) {
        report.max_rel_error = std::isnan(err) ? std::numeric_limits<double>::infinity() : err;
        report.worst_input = k;
        report.worst_index = i;
        report.worst_analytic = analytic[k][i];
        report.worst_numeric = numeric;
      }
    }
  }
  for (auto& in : inputs) in.zero_grad();
  report.passed = report.max_rel_error <= tol;
  return report;
}

}  // namespace rskip
