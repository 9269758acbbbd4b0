#pragma once

#include <functional>

#include <Eigen/Core>

namespace lsa {

/// Objective callback: returns f(x) and, when grad != nullptr, writes df/dx.
using SmoothObjective = std::function<double(const Eigen::VectorXd& x, Eigen::VectorXd* grad)>;

struct OptimResult {
  Eigen::VectorXd x;
  double value = 0.0;
  int iterations = 0;
  bool converged = false;  // gradient norm fell below tolerance
};

/// Limited-memory BFGS ascent with backtracking (Armijo) line search.
/// Only improving steps are accepted, so value >= f(x0) always holds.
/// Throws InnerOptFailure if f(x0) or its gradient is not finite.
OptimResult maximize_lbfgs(const SmoothObjective& f, Eigen::VectorXd x0, int max_iters, double grad_tol,
                           int history = 8);

}  // namespace lsa
