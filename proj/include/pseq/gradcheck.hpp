#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "pseq/tensor.hpp"

namespace pseq {
namespace gradcheck {

struct Result {
  double max_rel_err = 0.0;
  bool finite = true;
  std::string worst;  // "tensor#k[i]" of the largest deviation

  bool passed(double tolerance) const { return finite && max_rel_err <= tolerance; }
};

// |a - n| relative to the larger magnitude; comparisons below `floor`
// degenerate to an absolute check at that scale.
inline double relative_error(double a, double n, double floor = 1e-3) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

/// Central finite-difference check, 64-bit only.
///
/// `grad_fn` runs the analytic forward + backward and accumulates gradients
/// into the grad buffers of the probed tensors. `loss_fn` evaluates the same
/// scalar from the current tensor values. Every element of every probed
/// tensor is perturbed by +/- epsilon.
inline Result check(const std::function<double()>& loss_fn, const std::function<void()>& grad_fn,
                    const std::vector<Tensor<double>*>& wrt, double epsilon = 1e-5) {
  Result res;
  for (auto* t : wrt) {
    t->ensure_grad();
    t->zero_grad();
  }
  grad_fn();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(wrt.size());
  for (auto* t : wrt) analytic.push_back(t->grad());

  for (size_t k = 0; k < wrt.size(); ++k) {
    Tensor<double>& t = *wrt[k];
    for (int64_t i = 0; i < t.size(); ++i) {
      const double saved = t[i];
      t[i] = saved + epsilon;
      const double lp = loss_fn();
      t[i] = saved - epsilon;
      const double lm = loss_fn();
      t[i] = saved;
      const double numeric = (lp - lm) / (2.0 * epsilon);
      const double a = analytic[k][static_cast<size_t>(i)];
      if (!std::isfinite(numeric) || !std::isfinite(a)) {
        res.finite = false;
        res.worst = "tensor#" + std::to_string(k) + "[" + std::to_string(i) + "] non-finite";
        return res;
      }
      const double err = relative_error(a, numeric);
      if (err > res.max_rel_err) {
        res.max_rel_err = err;
        res.worst = "tensor#" + std::to_string(k) + "[" + std::to_string(i) + "] analytic=" +
                    std::to_string(a) + " numeric=" + std::to_string(numeric);
      }
    }
  }
  return res;
}

/// Convenience: scalar probe loss sum(y * weights) with fixed random weights,
/// the usual way to reduce a tensor-valued operation for checking.
inline double weighted_sum(const Tensor<double>& y, const Tensor<double>& weights) {
  if (!y.same_shape(weights)) throw std::invalid_argument("weighted_sum: shape mismatch");
  double s = 0.0;
  for (int64_t i = 0; i < y.size(); ++i) s += y[i] * weights[i];
  return s;
}

}  // namespace gradcheck
}  // namespace pseq
