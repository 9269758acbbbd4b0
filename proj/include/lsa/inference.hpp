#pragma once

// Penalised EM (MAP) for the latent style allocation model.
//
// Each iteration computes responsibilities over the K*M (style, pattern)
// grid, then updates pi in closed form, the stick-breaking values by an inner
// L-BFGS ascent, and the Gaussian layer by exact block updates (alpha, eta,
// delta) followed by a safeguarded covariance ascent. Every block is a
// non-decreasing step on the penalised objective.

#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "lsa/core_model.hpp"
#include "lsa/random.hpp"

namespace lsa {

/// r(n, k*M + m) = P(style k, pattern m | observation n).
struct Responsibilities {
  Eigen::MatrixXd r;
  int K = 1;
  int M = 1;

  static constexpr int index(int k, int m, int M) noexcept { return k * M + m; }
  /// N x M, summed over styles.
  Eigen::MatrixXd pattern_totals() const;
  /// K x M, summed over observations.
  Eigen::MatrixXd cell_counts() const;
};

enum class InitScheme { KMeansPatternMeans, PriorDraw, UserSupplied };

struct InnerOptSettings {
  int max_iters = 100;
  double grad_tol = 1e-8;
};

struct FitConfig {
  int max_iters = 500;
  double rel_tol = 1e-7;
  int n_restarts = 5;
  InitScheme init_scheme = InitScheme::KMeansPatternMeans;
  InnerOptSettings inner_opt;
  std::uint64_t seed = 1;
  PriorSettings priors;
  std::optional<LsaParams> initial_params;  // for InitScheme::UserSupplied
  int threads = 1;                          // restarts run concurrently
  int mean_sweeps = 1;                      // alpha/eta/delta sweeps per M-step
  bool gradient_polish = false;             // L-BFGS on the full objective after EM
  bool relabel = true;                      // search pattern and style orders in the stick-breaking M-step

  void validate() const;
  /// Everything except the LSA-specific initial-parameter check.
  void validate_common() const;
};

template <typename Params>
struct BasicFitReport {
  Params params;
  std::vector<double> objective_trace;
  bool converged = false;
  int n_iters = 0;
  Responsibilities responsibilities;
  Eigen::VectorXd per_point_loglik;
  std::vector<double> restart_objectives;  // final objective per restart, NaN if the restart failed
  std::vector<int> rescue_iterations;      // iterations where an empty pattern was re-seeded
  std::vector<std::vector<double>> restart_traces;  // objective trace of every restart, empty if it failed
  std::vector<std::vector<int>> restart_rescues;    // rescue iterations of every restart
  int best_restart = 0;

  double objective() const { return objective_trace.empty() ? 0.0 : objective_trace.back(); }
};

using FitReport = BasicFitReport<LsaParams>;

struct EStepResult {
  Responsibilities resp;
  Eigen::VectorXd loglik;  // per observation, log of the normaliser
};

Responsibilities e_step(const LsaParams& params, std::span<const ReturnObservation> data);
EStepResult e_step_with_loglik(const LsaParams& params, std::span<const ReturnObservation> data);

/// Dirichlet-multinomial MAP of each receiver's style weights.
/// Throws AllZeroRow if a receiver has no observations.
StyleSimplex m_step_pi(const Responsibilities& resp, std::span<const ReturnObservation> data, int n_receivers,
                       double alpha0);

/// Expected complete-data objective of the stick-breaking values plus their
/// standard-normal prior, given K x M expected counts.
double stick_objective(const Eigen::MatrixXd& counts, const StickBreakingBetas& betas);

/// Inner ascent on stick_objective over the ordered parameterisation.
/// Throws InnerOptFailure if the objective is not finite at `betas`.
StickBreakingBetas m_step_theta(const Responsibilities& resp, const StickBreakingBetas& betas,
                                const InnerOptSettings& settings = {});

/// Label orders for the stick-breaking M-step. Relabelling patterns or styles
/// together with their responsibilities leaves every other term of the
/// expected objective unchanged, so choosing the order by stick_objective is a
/// valid M-step move. It lets EM leave optima where the ordering constraint
/// binds only because of how the labels were initialised.
struct StickRelabeling {
  std::vector<int> styles;    // new style k is old style styles[k]
  std::vector<int> patterns;  // new pattern m is old pattern patterns[m]
  StickBreakingBetas betas;   // ascent result under the chosen labels
};

/// Tries every pattern order (M <= 4) or every transposition (M > 4), then
/// likewise for styles, each followed by the inner ascent from `betas`. Ties
/// keep the current labels. `counts` is K x M.
StickRelabeling m_step_theta_relabel(const Eigen::MatrixXd& counts, const StickBreakingBetas& betas,
                                     const InnerOptSettings& settings = {});

/// Column (k, m) of the result is column (styles[k], patterns[m]) of `resp`.
Responsibilities relabel(const Responsibilities& resp, const std::vector<int>& styles,
                         const std::vector<int>& patterns);

struct GaussianUpdate {
  std::vector<GaussianComponent> components;
  std::vector<Eigen::MatrixXd> eta;
  std::vector<Eigen::MatrixXd> delta;
};

/// Gaussian-layer M-step from N x M pattern weights.
GaussianUpdate m_step_gaussians_weighted(const Eigen::MatrixXd& pattern_weights,
                                         std::span<const ReturnObservation> data, const GaussianLayer& current,
                                         int sweeps = 1);

GaussianUpdate m_step_gaussians(const Responsibilities& resp, std::span<const ReturnObservation> data,
                                const GaussianLayer& current, int sweeps = 1);

/// Expected complete-data objective of the Gaussian layer plus its log prior.
double gaussian_layer_objective(const Eigen::MatrixXd& pattern_weights, std::span<const ReturnObservation> data,
                                const GaussianLayer& layer);

/// Penalised objective: marginal log-likelihood plus log prior.
double penalized_objective(const LsaParams& params, std::span<const ReturnObservation> data);

FitReport fit(const ObservationSet& data, int K, int M, const FitConfig& cfg);

/// L-BFGS on log_posterior_unnorm in unconstrained coordinates. Never
/// returns parameters with a lower objective than the input.
LsaParams gradient_refine(const LsaParams& params, std::span<const ReturnObservation> data, int max_iters,
                          double grad_tol = 1e-6);

/// Per-observation argmax over (k, m); ties go to the smaller (k, m).
std::vector<std::pair<int, int>> map_pattern_assignments(const Responsibilities& resp);
std::vector<std::pair<int, int>> map_pattern_assignments(const FitReport& report);

// ---------------------------------------------------------------------------
// Initialisation helpers, shared with the baseline families.

/// k-means++ on locations with n_centers centres, Lloyd refinement, then Ward
/// merging down to n_groups. Returns one label in [0, n_groups) per point.
std::vector<int> kmeans_then_merge(std::span<const ReturnObservation> data, int n_centers, int n_groups, Rng& rng);

/// Gaussian layer with one pattern per label group: intercept effect at the
/// group centroid, covariance from the group spread, zero offsets.
GaussianLayer layer_from_labels(std::span<const ReturnObservation> data, const std::vector<int>& labels,
                                int n_groups, int n_receivers, int n_servers, int n_covariates,
                                const PriorSettings& priors);

/// Pattern effects, scales and correlations drawn from the prior; zero offsets.
GaussianLayer prior_draw_layer(int n_patterns, int n_receivers, int n_servers, int n_covariates,
                               const PriorSettings& priors, Rng& rng);

/// K x (M-1) columns of sorted standard normals, redrawn until strictly ascending.
StickBreakingBetas random_ordered_betas(int K, int M, Rng& rng);

}  // namespace lsa
