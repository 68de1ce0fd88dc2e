#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "mixlab/tensor.hpp"

namespace mixlab {

// Largest elementwise relative disagreement between the autodiff gradient
// of f at x and the central difference (f(x+h) - f(x-h)) / 2h:
//   max_i |analytic_i - numeric_i| / (|analytic_i| + |numeric_i| + 1e-12).
// x must be a leaf; its values are restored on return.
inline double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f, Tensor<double> x, double h = 1e-5) {
  x.set_requires_grad(true);
  x.zero_grad();
  backward(f(x));
  const std::vector<double> analytic(x.grad().begin(), x.grad().end());

  NoGradGuard no_grad;
  auto values = x.mutable_data();
  double worst = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + h;
    const double up = f(x).item();
    values[i] = saved - h;
    const double down = f(x).item();
    values[i] = saved;
    const double numeric = (up - down) / (2.0 * h);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / (std::abs(analytic[i]) + std::abs(numeric) + 1e-12));
  }
  return worst;
}

}  // namespace mixlab
