// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>

#include "sftn/ops.hpp"
#include "sftn/tensor.hpp"

// Central finite-difference verification of analytic gradients. Intended for
// the 64-bit instantiation of the same code paths used in training.

namespace sftn {

// f maps the current values of `points` to a scalar Tensor. Returns the max
// over all coordinates of |analytic - central difference| / max(1, |analytic|).
inline double grad_check(const std::function<Tensor<double>()>& f,
                         std::vector<Tensor<double>> points, double eps = 1e-5) {
  for (auto& p : points) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  Tensor<double> loss = f();
  if (!loss.all_finite())
    throw std::runtime_error("grad_check: function non-finite at evaluation point");
  backward(loss);

  double worst = 0.0;
  for (auto& p : points) {
    auto& vals = p.data();
    const auto& analytic = p.grad();
    for (size_t i = 0; i < vals.size(); ++i) {
      const double keep = vals[i];
      vals[i] = keep + eps;
      const double fp = f().item();
      vals[i] = keep - eps;
      const double fm = f().item();
      vals[i] = keep;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw std::runtime_error("grad_check: function non-finite near evaluation point");
      const double numeric = (fp - fm) / (2.0 * eps);
      const double denom = std::max(1.0, std::abs(analytic[i]));
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace sftn
