#pragma once

// Restart loop and EM iteration shared by the LSA fitter and the baselines.
//
// A Model provides:
//   using Params = ...;
//   Params init(Rng&, int restart) const;
//   EStepResult e_step(const Params&) const;
//   double log_prior(const Params&) const;
//   Params m_step(const Params&, const EStepResult&, bool& rescued) const;

#include <cmath>
#include <limits>
#include <vector>

#include "lsa/error.hpp"
#include "lsa/inference.hpp"
#include "lsa/parallel.hpp"
#include "lsa/random.hpp"

namespace lsa::detail {

template <typename Params>
struct EmRun {
  Params params;
  std::vector<double> trace;
  bool converged = false;
  int n_iters = 0;
  EStepResult last;
  std::vector<int> rescues;
  bool ok = false;
};

template <typename Model>
EmRun<typename Model::Params> run_em(const Model& model, typename Model::Params params, const FitConfig& cfg) {
  EmRun<typename Model::Params> run;
  EStepResult es = model.e_step(params);
  double obj = es.loglik.sum() + model.log_prior(params);
  if (!std::isfinite(obj)) throw NumericalError("objective is not finite at the initial parameters");
  run.trace.push_back(obj);
  run.ok = true;
  for (int it = 0; it < cfg.max_iters; ++it) {
    typename Model::Params next;
    bool rescued = false;
    try {
      next = model.m_step(params, es, rescued);
    } catch (const NumericalError&) {
      if (it == 0) throw;
      break;  // keep the last good state
    }
    EStepResult next_es = model.e_step(next);
    const double next_obj = next_es.loglik.sum() + model.log_prior(next);
    if (!std::isfinite(next_obj)) {
      if (it == 0) throw NumericalError("objective became non-finite");
      break;
    }
    params = std::move(next);
    es = std::move(next_es);
    run.n_iters = it + 1;
    if (rescued) run.rescues.push_back(run.n_iters);
    const double prev = obj;
    obj = next_obj;
    run.trace.push_back(obj);
    if (!rescued && std::abs(obj - prev) <= cfg.rel_tol * std::abs(prev)) {
      run.converged = true;
      break;
    }
  }
  run.params = std::move(params);
  run.last = std::move(es);
  return run;
}

template <typename Model>
BasicFitReport<typename Model::Params> fit_with_restarts(const Model& model, const FitConfig& cfg) {
  using Params = typename Model::Params;
  const int n = cfg.n_restarts;
  std::vector<EmRun<Params>> runs(static_cast<std::size_t>(n));
  parallel_for(static_cast<std::size_t>(n), cfg.threads, [&](std::size_t r) {
    Rng rng = make_stream(cfg.seed, "restart", r);
    try {
      runs[r] = run_em(model, model.init(rng, static_cast<int>(r)), cfg);
    } catch (const NumericalError&) {
      runs[r].ok = false;
    }
  });

  BasicFitReport<Params> report;
  int best = -1;
  for (int r = 0; r < n; ++r) {
    const auto& run = runs[static_cast<std::size_t>(r)];
    report.restart_objectives.push_back(run.ok ? run.trace.back() : std::numeric_limits<double>::quiet_NaN());
    report.restart_traces.push_back(run.ok ? run.trace : std::vector<double>{});
    report.restart_rescues.push_back(run.rescues);
    if (run.ok && (best < 0 || run.trace.back() > runs[static_cast<std::size_t>(best)].trace.back())) best = r;
  }
  if (best < 0) throw NoValidRestart("every restart failed at its first iteration");
  auto& run = runs[static_cast<std::size_t>(best)];
  report.params = std::move(run.params);
  report.objective_trace = std::move(run.trace);
  report.converged = run.converged;
  report.n_iters = run.n_iters;
  report.responsibilities = std::move(run.last.resp);
  report.per_point_loglik = std::move(run.last.loglik);
  report.rescue_iterations = std::move(run.rescues);
  report.best_restart = best;
  return report;
}

/// Minor-axis standard deviation (metres) below which a pattern counts as
/// collapsed onto a point or a line.
inline constexpr double kCollapsedScale = 1e-4;

double min_axis_sd(const GaussianComponent& comp);

/// Re-seeds patterns whose total weight fell below 1e-6 N, or whose
/// covariance collapsed, at the worst-fit observation. Returns true if
/// anything changed.
bool rescue_empty_patterns(GaussianLayer& layer, const Eigen::VectorXd& pattern_mass,
                           const Eigen::VectorXd& loglik, std::span<const ReturnObservation> data);

}  // namespace lsa::detail
