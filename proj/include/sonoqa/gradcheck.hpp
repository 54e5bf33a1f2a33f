#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <vector>

#include "sonoqa/autograd.hpp"

namespace sonoqa {

// Scalar-valued function of several tensor inputs, built on the given tape.
using MultiFn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;
using SingleFn = std::function<Var<double>(Tape<double>&, const Var<double>&)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t input = 0;  // input holding the worst coordinate
  std::size_t index = 0;  // flat index of the worst coordinate
};

namespace detail {

inline double eval_scalar(const MultiFn& f, const std::vector<Tensor<double>>& points) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  vars.reserve(points.size());
  for (const auto& p : points) vars.push_back(tape.constant(p));
  const Var<double> y = f(tape, vars);
  if (y.numel() != 1) throw ContractError("grad_check: function must return a scalar");
  return y.value().item();
}

}  // namespace detail

// Compares reverse-mode gradients against central differences.
// Error per coordinate is |analytic - numeric| / max(1, |numeric|).
// `coords`, when given, restricts the check to those flat indices of each input.
inline GradCheckReport grad_check(const MultiFn& f, const std::vector<Tensor<double>>& points, double eps,
                                  const std::optional<std::vector<std::vector<std::size_t>>>& coords = std::nullopt) {
  if (!(eps > 0.0 && eps <= 1e-2)) throw ConfigError("grad_check eps must lie in (0, 1e-2]");
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const auto& p : points) vars.push_back(tape.leaf(p, true));
  const Var<double> y = f(tape, vars);
  tape.backward(y);

  GradCheckReport report;
  std::vector<Tensor<double>> probe = points;
  for (std::size_t k = 0; k < points.size(); ++k) {
    const Tensor<double> analytic = tape.grad(vars[k]);
    std::vector<std::size_t> idx;
    if (coords) {
      idx = coords->at(k);
    } else {
      idx.resize(points[k].numel());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    }
    for (std::size_t i : idx) {
      const double x0 = points[k][i];
      probe[k][i] = x0 + eps;
      const double fp = detail::eval_scalar(f, probe);
      probe[k][i] = x0 - eps;
      const double fm = detail::eval_scalar(f, probe);
      probe[k][i] = x0;
      const double numeric = (fp - fm) / (2.0 * eps);
      if (!std::isfinite(numeric)) throw NumericalError("grad_check: non-finite central difference");
      const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
      if (err > report.max_rel_error) report = {err, k, i};
    }
  }
  return report;
}

inline double grad_check(const SingleFn& f, const Tensor<double>& point, double eps) {
  return grad_check([&f](Tape<double>& t, const std::vector<Var<double>>& v) { return f(t, v[0]); },
                    std::vector<Tensor<double>>{point}, eps)
      .max_rel_error;
}

}  // namespace sonoqa
