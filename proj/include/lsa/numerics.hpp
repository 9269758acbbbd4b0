#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include <Eigen/Core>

namespace lsa {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();
inline constexpr double kLogTwoPi = 1.8378770664093454835606594728112;

/// log(1 / (1 + exp(-x))), stable for large |x|.
inline double log_sigmoid(double x) {
  return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// Log-sum-exp over a dense expression. Returns -inf when every term is -inf.
template <typename Derived>
double log_sum_exp(const Eigen::DenseBase<Derived>& v) {
  const double hi = v.maxCoeff();
  if (!std::isfinite(hi)) return hi;
  double acc = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) acc += std::exp(v.derived().coeff(i) - hi);
  return hi + std::log(acc);
}

inline double log_beta_fn(double a, double b) {
  return std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
}

}  // namespace lsa
