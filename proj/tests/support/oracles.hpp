#pragma once

// Independent reference implementations used only by the tests. None of these
// call into the library's density or transform code.

#include <functional>
#include <vector>

#include <Eigen/Core>

#include "lsa/core_model.hpp"
#include "lsa/random.hpp"

namespace lsa::test {

double logistic(double x);

/// Stick-breaking with plain loops in linear space.
Eigen::MatrixXd stick_break_oracle(const Eigen::MatrixXd& beta);

/// Bivariate normal density from the explicit 2x2 inverse and determinant.
double mvn_pdf_oracle(const Vec2& y, const Vec2& mu, const Mat2& sigma);

/// (alpha + eta - delta) x with explicit loops.
Vec2 mean_oracle(const Eigen::MatrixXd& alpha, const Eigen::MatrixXd& eta, const Eigen::MatrixXd& delta,
                 const Eigen::VectorXd& x);

/// Linear-space double sum sum_k sum_m pi_ik theta_km N(y; mu_m, Sigma_m).
double lsa_likelihood_linear(const LsaParams& p, const ReturnObservation& obs);

/// Linear-space responsibilities, row-normalised, (k, m) -> k*M + m.
Eigen::RowVectorXd lsa_responsibilities_linear(const LsaParams& p, const ReturnObservation& obs);

/// Random valid parameters. Betas are sorted normals scaled by `beta_sd`.
LsaParams random_params(int K, int M, int R, int S, int P, Rng& rng, double beta_sd = 1.0);

/// Observations with random receivers, servers and Gaussian covariates
/// (intercept in column 0), locations from the model.
ObservationSet random_observations(const LsaParams& p, int n, Rng& rng);

/// Minimum-cost assignment row -> column for a square matrix.
std::vector<int> hungarian(const Eigen::MatrixXd& cost);
/// Same by enumerating permutations (n <= 8).
std::vector<int> brute_force_assignment(const Eigen::MatrixXd& cost);

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b);

/// Central differences with step h per coordinate.
Eigen::VectorXd central_difference(const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& x,
                                   double h);

struct Quadrature {
  Eigen::VectorXd nodes;
  Eigen::VectorXd weights;
};

/// n-point Gauss-Legendre rule on [a, b] (Newton iteration on P_n).
Quadrature gauss_legendre(int n, double a, double b);

/// Dense ridge-penalised generalised least squares for all of alpha, eta and
/// delta jointly, given per-observation pattern weights and fixed
/// covariances. Returns the coefficient vector in the order
/// [vec(alpha_0) .. vec(alpha_{M-1}), vec(eta_0) .., vec(delta_0) ..].
Eigen::VectorXd joint_ridge_oracle(const ObservationSet& data, const Eigen::MatrixXd& weights,
                                   const std::vector<Mat2>& covariances, double alpha_scale, double eta_scale,
                                   double delta_scale);

}  // namespace lsa::test
