#include "lsa/optimize.hpp"

#include <cmath>
#include <deque>

#include "lsa/error.hpp"

namespace lsa {

OptimResult maximize_lbfgs(const SmoothObjective& f, Eigen::VectorXd x0, int max_iters, double grad_tol,
                           int history) {
  OptimResult res;
  res.x = std::move(x0);
  Eigen::VectorXd g(res.x.size());
  res.value = f(res.x, &g);
  if (!std::isfinite(res.value) || !g.allFinite())
    throw InnerOptFailure("objective or gradient is not finite at the starting point");

  std::deque<Eigen::VectorXd> s_hist, y_hist;
  std::deque<double> rho_hist;
  Eigen::VectorXd g_new(res.x.size());

  for (int it = 0; it < max_iters; ++it) {
    if (g.lpNorm<Eigen::Infinity>() < grad_tol) {
      res.converged = true;
      break;
    }
    // Two-loop recursion on the negated objective.
    Eigen::VectorXd q = g;
    std::vector<double> a(s_hist.size());
    for (int j = static_cast<int>(s_hist.size()) - 1; j >= 0; --j) {
      a[j] = rho_hist[j] * s_hist[j].dot(q);
      q -= a[j] * y_hist[j];
    }
    if (!s_hist.empty()) q *= s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
    for (std::size_t j = 0; j < s_hist.size(); ++j) {
      const double b = rho_hist[j] * y_hist[j].dot(q);
      q += s_hist[j] * (a[j] - b);
    }
    Eigen::VectorXd dir = q;
    double slope = g.dot(dir);
    if (!(slope > 0.0) || !dir.allFinite()) {
      dir = g;
      slope = g.squaredNorm();
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
    }
    double step = s_hist.empty() ? std::min(1.0, 1.0 / g.norm()) : 1.0;

    bool accepted = false;
    Eigen::VectorXd x_new;
    double f_new = 0.0;
    for (int ls = 0; ls < 50; ++ls) {
      x_new = res.x + step * dir;
      f_new = f(x_new, &g_new);
      if (std::isfinite(f_new) && g_new.allFinite() && f_new >= res.value + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    ++res.iterations;
    if (!accepted) break;

    Eigen::VectorXd s = x_new - res.x;
    Eigen::VectorXd y = g - g_new;  // curvature pair for -f
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      s_hist.push_back(std::move(s));
      y_hist.push_back(std::move(y));
      rho_hist.push_back(1.0 / sy);
      if (static_cast<int>(s_hist.size()) > history) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
    }
    const double previous = res.value;
    res.x = std::move(x_new);
    res.value = f_new;
    g = g_new;
    if (std::abs(res.value - previous) <= 1e-15 * std::max(1.0, std::abs(res.value))) break;
  }
  if (g.lpNorm<Eigen::Infinity>() < grad_tol) res.converged = true;
  return res;
}

}  // namespace lsa
