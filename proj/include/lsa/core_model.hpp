#pragma once

// Parameters and densities of the latent style allocation model.
//
// A receiver i mixes over K styles with weights pi_i. Style k mixes over M
// patterns with weights theta_k, which come from an ordered stick-breaking
// transform of a K x (M-1) matrix of reals. Pattern m is a bivariate normal
// whose mean is (alpha_m + eta_r - delta_s) x for receiver r, server s and
// covariate row x.

#include <span>
#include <vector>

#include <Eigen/Core>

#include "lsa/error.hpp"

namespace lsa {

inline constexpr int kDims = 2;
inline constexpr double kCholeskyJitter = 1e-8;

using Vec2 = Eigen::Vector2d;
using Mat2 = Eigen::Matrix2d;

/// One return impact: (lateral, depth) in metres plus context.
struct ReturnObservation {
  int receiver_id = 0;
  int server_id = 0;
  Vec2 location = Vec2::Zero();
  Eigen::VectorXd covariates;
};

/// Observations together with the roster sizes their ids index into.
struct ObservationSet {
  std::vector<ReturnObservation> obs;
  int n_receivers = 0;
  int n_servers = 0;
  int n_covariates = 0;

  std::size_t size() const noexcept { return obs.size(); }
  bool empty() const noexcept { return obs.empty(); }

  /// Throws DataError / DimensionMismatch on a broken invariant.
  void validate() const;
};

struct StickBreakingBetas {
  Eigen::MatrixXd beta;  // K x (M-1), strictly ascending down each column

  int styles() const noexcept { return static_cast<int>(beta.rows()); }
  int patterns() const noexcept { return static_cast<int>(beta.cols()) + 1; }

  /// Throws OrderingViolation if a column is not strictly ascending.
  void validate() const;

  /// Column-wise (first value, log increments) coordinates, K(M-1) reals.
  Eigen::VectorXd to_unconstrained() const;
  static StickBreakingBetas from_unconstrained(int K, int M, const Eigen::Ref<const Eigen::VectorXd>& u);
};

struct PatternSimplex {
  Eigen::MatrixXd theta;  // K x M
};

struct StyleSimplex {
  Eigen::MatrixXd pi;  // R x K

  /// Throws InvalidSimplex if a row is not a probability vector.
  void validate() const;
};

/// A pattern's mean effects and observation covariance. Sigma = L L^T with
/// L = diag(scale_vec) * chol(corr) plus a small diagonal jitter.
struct GaussianComponent {
  Eigen::MatrixXd alpha;  // 2 x P
  Mat2 sigma_chol = Mat2::Identity();
  Vec2 scale_vec = Vec2::Ones();
  double correlation = 0.0;

  static GaussianComponent from_scales(Eigen::MatrixXd alpha, const Vec2& scales, double correlation);

  Mat2 covariance() const { return sigma_chol * sigma_chol.transpose(); }
  void validate() const;
};

/// Prior hyperparameters. Defaults are artifact choices.
struct PriorSettings {
  double alpha0 = 1.0;       // symmetric Dirichlet concentration for weight simplexes
  double alpha_scale = 2.5;  // sd of the normal prior on pattern effect entries
  double eta_scale = 2.5;    // sd on receiver offset entries
  double delta_scale = 2.5;  // sd on server offset entries
  double lkj_eta = 1.0;      // LKJ shape on each correlation
  double sigma_scale = 2.0;  // half-Cauchy scale on covariance scales

  void validate() const;
};

/// Everything about the observation model that is shared by LSA and the
/// baseline families: pattern Gaussians, offsets, priors.
struct GaussianLayer {
  std::vector<GaussianComponent> components;
  std::vector<Eigen::MatrixXd> eta;    // per receiver, 2 x P
  std::vector<Eigen::MatrixXd> delta;  // per server, 2 x P
  PriorSettings priors;

  int n_patterns() const noexcept { return static_cast<int>(components.size()); }
  int n_receivers() const noexcept { return static_cast<int>(eta.size()); }
  int n_servers() const noexcept { return static_cast<int>(delta.size()); }
  int n_covariates() const noexcept {
    return components.empty() ? 0 : static_cast<int>(components.front().alpha.cols());
  }

  void validate() const;
};

struct LsaParams : GaussianLayer {
  int K = 1;
  int M = 1;
  StickBreakingBetas betas;
  StyleSimplex pi;

  void validate() const;
};

// ---------------------------------------------------------------------------

PatternSimplex stick_break(const StickBreakingBetas& betas);

/// log theta, computed without forming theta first.
Eigen::MatrixXd log_stick_break(const StickBreakingBetas& betas);

Vec2 component_mean(const GaussianComponent& comp, const Eigen::MatrixXd& eta_r,
                    const Eigen::MatrixXd& delta_s, const Eigen::VectorXd& x);

double mvn_logpdf(const Vec2& y, const Vec2& mu, const Mat2& sigma_chol);

/// log N(y; mu_m, Sigma_m) for every pattern m, written into out (size M).
void pattern_log_densities(const GaussianLayer& layer, const ReturnObservation& obs,
                           Eigen::Ref<Eigen::VectorXd> out);

double marginal_loglik_point(const LsaParams& params, const ReturnObservation& obs);

/// Sequential sum of marginal_loglik_point. Throws EmptyData.
double marginal_loglik(const LsaParams& params, std::span<const ReturnObservation> data);

/// Log prior of the Gaussian layer (mean effects, offsets, LKJ, half-Cauchy).
double gaussian_layer_log_prior(const GaussianLayer& layer);

/// Symmetric Dirichlet(alpha0) log density of one simplex row.
double dirichlet_log_density(const Eigen::Ref<const Eigen::RowVectorXd>& p, double alpha0);

double log_prior(const LsaParams& params);

double log_posterior_unnorm(const LsaParams& params, std::span<const ReturnObservation> data);

// ---------------------------------------------------------------------------
// Unconstrained coordinates, in this order:
//   betas column by column (first value, K-1 log increments);
//   pi row by row (K-1 log ratios against the last style);
//   per component: alpha (column-major), log scale_1, log scale_2, atanh(corr);
//   eta per receiver (column-major); delta per server (column-major).

Eigen::VectorXd pack_unconstrained(const LsaParams& params);

/// Rebuilds parameters from coordinates; shape and priors come from `shape`.
LsaParams unpack_unconstrained(const LsaParams& shape, const Eigen::Ref<const Eigen::VectorXd>& u);

/// Analytic gradient of log_posterior_unnorm in unconstrained coordinates.
Eigen::VectorXd log_posterior_gradient(const LsaParams& params, std::span<const ReturnObservation> data);

}  // namespace lsa
