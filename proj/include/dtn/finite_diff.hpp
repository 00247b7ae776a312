#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dtn/tensor.hpp"

namespace dtn {

/// Central-difference gradient of a scalar function. Each coordinate is
/// probed at theta +/- h and restored afterwards.
inline std::vector<double> finite_diff_grad(
    const std::function<double(std::span<const double>)>& f, std::vector<double> theta,
    double h = 1e-4) {
  if (!(h > 0)) throw ConfigError("finite_diff_grad: step must be positive");
  std::vector<double> grad(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double orig = theta[i];
    theta[i] = orig + h;
    const double fp = f(theta);
    theta[i] = orig - h;
    const double fm = f(theta);
    theta[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NonFiniteError("finite_diff_grad: non-finite function value probing coordinate " +
                           std::to_string(i));
    }
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

/// ||a - b||_2 / max(||a||_2, ||b||_2, floor). Zero when both are (near) zero.
inline double relative_error(std::span<const double> analytic, std::span<const double> numeric,
                             double floor = 1e-10) {
  if (analytic.size() != numeric.size()) {
    throw DimensionError("relative_error: length mismatch");
  }
  double diff = 0, na = 0, nn = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), floor});
}

}  // namespace dtn
