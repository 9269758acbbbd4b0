#include "lsa/core_model.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "lsa/numerics.hpp"

namespace lsa {

namespace {

constexpr double kSimplexTol = 1e-12;

double normal_log_density(double x, double sd) {
  return -0.5 * kLogTwoPi - std::log(sd) - 0.5 * (x / sd) * (x / sd);
}

double half_cauchy_log_density(double x, double scale) {
  const double u = x / scale;
  return std::log(2.0) - std::log(std::numbers::pi) - std::log(scale) - std::log1p(u * u);
}

// LKJ density of the single free correlation of a 2x2 correlation matrix.
double lkj2_log_density(double r, double shape) {
  double lp = -(2.0 * shape - 1.0) * std::log(2.0) - log_beta_fn(shape, shape);
  if (shape != 1.0) lp += (shape - 1.0) * std::log1p(-r * r);
  return lp;
}

void require_shape(const Eigen::MatrixXd& m, Eigen::Index rows, Eigen::Index cols, const char* what) {
  if (m.rows() != rows || m.cols() != cols) {
    throw DimensionMismatch(std::string(what) + ": expected " + std::to_string(rows) + "x" +
                            std::to_string(cols) + ", got " + std::to_string(m.rows()) + "x" +
                            std::to_string(m.cols()));
  }
}

void check_observation(const GaussianLayer& layer, const ReturnObservation& obs) {
  if (obs.receiver_id < 0 || obs.receiver_id >= layer.n_receivers() || obs.server_id < 0 ||
      obs.server_id >= layer.n_servers()) {
    throw DimensionMismatch("observation references receiver " + std::to_string(obs.receiver_id) +
                            " / server " + std::to_string(obs.server_id) + " outside the rosters");
  }
  if (obs.covariates.size() != layer.n_covariates()) {
    throw DimensionMismatch("covariate vector has " + std::to_string(obs.covariates.size()) +
                            " entries, model expects " + std::to_string(layer.n_covariates()));
  }
}

// Shared evaluation of Eq.-8-style sums given precomputed log weights.
double mixture_point(const GaussianLayer& layer, const Eigen::MatrixXd& log_theta,
                     const Eigen::RowVectorXd& log_pi_row, const ReturnObservation& obs,
                     Eigen::VectorXd& log_dens, Eigen::MatrixXd& terms) {
  pattern_log_densities(layer, obs, log_dens);
  const Eigen::Index K = log_theta.rows();
  const Eigen::Index M = log_theta.cols();
  for (Eigen::Index k = 0; k < K; ++k)
    for (Eigen::Index m = 0; m < M; ++m) terms(k, m) = log_pi_row(k) + log_theta(k, m) + log_dens(m);
  return log_sum_exp(terms);
}

}  // namespace

// ---------------------------------------------------------------------------

void ObservationSet::validate() const {
  if (n_covariates < 1) throw DimensionMismatch("at least one covariate column is required");
  for (std::size_t n = 0; n < obs.size(); ++n) {
    const auto& o = obs[n];
    if (!o.location.allFinite()) throw DataError("observation " + std::to_string(n) + " has a non-finite location");
    if (o.covariates.size() != n_covariates)
      throw DimensionMismatch("observation " + std::to_string(n) + " has the wrong covariate count");
    if (!o.covariates.allFinite())
      throw DataError("observation " + std::to_string(n) + " has non-finite covariates");
    if (o.receiver_id < 0 || o.receiver_id >= n_receivers || o.server_id < 0 || o.server_id >= n_servers)
      throw DataError("observation " + std::to_string(n) + " has an id outside the rosters");
  }
}

void StickBreakingBetas::validate() const {
  if (!beta.allFinite()) throw OrderingViolation("stick-breaking values must be finite");
  for (Eigen::Index m = 0; m < beta.cols(); ++m)
    for (Eigen::Index k = 1; k < beta.rows(); ++k)
      if (!(beta(k - 1, m) < beta(k, m)))
        throw OrderingViolation("stick-breaking column " + std::to_string(m) +
                                " is not strictly ascending at style " + std::to_string(k));
}

Eigen::VectorXd StickBreakingBetas::to_unconstrained() const {
  const Eigen::Index K = beta.rows();
  Eigen::VectorXd u(K * beta.cols());
  Eigen::Index pos = 0;
  for (Eigen::Index m = 0; m < beta.cols(); ++m) {
    u(pos++) = beta(0, m);
    for (Eigen::Index k = 1; k < K; ++k) u(pos++) = std::log(beta(k, m) - beta(k - 1, m));
  }
  return u;
}

StickBreakingBetas StickBreakingBetas::from_unconstrained(int K, int M, const Eigen::Ref<const Eigen::VectorXd>& u) {
  if (u.size() != static_cast<Eigen::Index>(K) * (M - 1))
    throw DimensionMismatch("wrong number of unconstrained stick-breaking values");
  StickBreakingBetas out{Eigen::MatrixXd(K, M - 1)};
  Eigen::Index pos = 0;
  for (int m = 0; m < M - 1; ++m) {
    out.beta(0, m) = u(pos++);
    for (int k = 1; k < K; ++k) out.beta(k, m) = out.beta(k - 1, m) + std::exp(u(pos++));
  }
  return out;
}

void StyleSimplex::validate() const {
  for (Eigen::Index i = 0; i < pi.rows(); ++i) {
    const auto row = pi.row(i);
    if (!row.allFinite() || row.minCoeff() < 0.0 || row.maxCoeff() > 1.0 ||
        std::abs(row.sum() - 1.0) > kSimplexTol)
      throw InvalidSimplex("style weights of receiver " + std::to_string(i) + " are not a simplex");
  }
}

GaussianComponent GaussianComponent::from_scales(Eigen::MatrixXd alpha, const Vec2& scales, double correlation) {
  GaussianComponent c;
  c.alpha = std::move(alpha);
  c.scale_vec = scales;
  c.correlation = correlation;
  const double tail = std::sqrt(std::max(0.0, 1.0 - correlation * correlation));
  c.sigma_chol << scales(0) + kCholeskyJitter, 0.0,
                  scales(1) * correlation, scales(1) * tail + kCholeskyJitter;
  return c;
}

void GaussianComponent::validate() const {
  if (alpha.rows() != kDims) throw DimensionMismatch("pattern effects must have 2 rows");
  if (!alpha.allFinite()) throw NumericalError("pattern effects must be finite");
  if (!(scale_vec.minCoeff() > 0.0) || !scale_vec.allFinite())
    throw NonPdCovariance("covariance scales must be strictly positive");
  if (!(std::abs(correlation) < 1.0)) throw NonPdCovariance("correlation must lie in (-1, 1)");
  if (!(sigma_chol(0, 0) > 0.0) || !(sigma_chol(1, 1) > 0.0))
    throw NonPdCovariance("covariance Cholesky factor has a non-positive diagonal");
}

void PriorSettings::validate() const {
  if (!(alpha0 > 0.0) || !(alpha_scale > 0.0) || !(eta_scale > 0.0) || !(delta_scale > 0.0) ||
      !(lkj_eta > 0.0) || !(sigma_scale > 0.0))
    throw Error("prior hyperparameters must be strictly positive");
}

void GaussianLayer::validate() const {
  priors.validate();
  if (components.empty()) throw DimensionMismatch("at least one pattern component is required");
  const Eigen::Index P = n_covariates();
  if (P < 1) throw DimensionMismatch("at least one covariate column is required");
  for (const auto& c : components) {
    c.validate();
    require_shape(c.alpha, kDims, P, "pattern effects");
  }
  for (const auto& e : eta) require_shape(e, kDims, P, "receiver offset");
  for (const auto& d : delta) require_shape(d, kDims, P, "server offset");
}

void LsaParams::validate() const {
  if (K < 1 || M < 1) throw DimensionMismatch("style and pattern counts must be at least 1");
  GaussianLayer::validate();
  if (n_patterns() != M) throw DimensionMismatch("component count differs from M");
  require_shape(betas.beta, K, M - 1, "stick-breaking values");
  betas.validate();
  require_shape(pi.pi, n_receivers(), K, "style weights");
  pi.validate();
}

// ---------------------------------------------------------------------------

PatternSimplex stick_break(const StickBreakingBetas& betas) {
  betas.validate();
  const Eigen::Index K = betas.beta.rows();
  const Eigen::Index M = betas.beta.cols() + 1;
  PatternSimplex out{Eigen::MatrixXd(K, M)};
  for (Eigen::Index k = 0; k < K; ++k) {
    double remainder = 1.0;
    for (Eigen::Index m = 0; m + 1 < M; ++m) {
      const double b = betas.beta(k, m);
      out.theta(k, m) = sigmoid(b) * remainder;
      remainder *= sigmoid(-b);
    }
    out.theta(k, M - 1) = remainder;
  }
  return out;
}

Eigen::MatrixXd log_stick_break(const StickBreakingBetas& betas) {
  betas.validate();
  const Eigen::Index K = betas.beta.rows();
  const Eigen::Index M = betas.beta.cols() + 1;
  Eigen::MatrixXd out(K, M);
  for (Eigen::Index k = 0; k < K; ++k) {
    double log_remainder = 0.0;
    for (Eigen::Index m = 0; m + 1 < M; ++m) {
      const double b = betas.beta(k, m);
      out(k, m) = log_sigmoid(b) + log_remainder;
      log_remainder += log_sigmoid(-b);
    }
    out(k, M - 1) = log_remainder;
  }
  return out;
}

Vec2 component_mean(const GaussianComponent& comp, const Eigen::MatrixXd& eta_r,
                    const Eigen::MatrixXd& delta_s, const Eigen::VectorXd& x) {
  const Eigen::Index P = comp.alpha.cols();
  if (comp.alpha.rows() != kDims || eta_r.rows() != kDims || delta_s.rows() != kDims || eta_r.cols() != P ||
      delta_s.cols() != P || x.size() != P)
    throw DimensionMismatch("mean-structure dimensions disagree");
  return (comp.alpha + eta_r - delta_s) * x;
}

double mvn_logpdf(const Vec2& y, const Vec2& mu, const Mat2& sigma_chol) {
  const double l00 = sigma_chol(0, 0);
  const double l10 = sigma_chol(1, 0);
  const double l11 = sigma_chol(1, 1);
  if (!(l00 > 0.0) || !(l11 > 0.0)) throw NonPdCovariance("covariance Cholesky factor has a non-positive diagonal");
  const double z0 = (y(0) - mu(0)) / l00;
  const double z1 = (y(1) - mu(1) - l10 * z0) / l11;
  return -kLogTwoPi - std::log(l00) - std::log(l11) - 0.5 * (z0 * z0 + z1 * z1);
}

void pattern_log_densities(const GaussianLayer& layer, const ReturnObservation& obs,
                           Eigen::Ref<Eigen::VectorXd> out) {
  check_observation(layer, obs);
  const auto& eta = layer.eta[obs.receiver_id];
  const auto& delta = layer.delta[obs.server_id];
  for (int m = 0; m < layer.n_patterns(); ++m) {
    const auto& comp = layer.components[m];
    out(m) = mvn_logpdf(obs.location, component_mean(comp, eta, delta, obs.covariates), comp.sigma_chol);
  }
}

double marginal_loglik_point(const LsaParams& params, const ReturnObservation& obs) {
  const Eigen::MatrixXd log_theta = log_stick_break(params.betas);
  Eigen::VectorXd log_dens(params.M);
  Eigen::MatrixXd terms(params.K, params.M);
  check_observation(params, obs);
  const Eigen::RowVectorXd log_pi = params.pi.pi.row(obs.receiver_id).array().log();
  return mixture_point(params, log_theta, log_pi, obs, log_dens, terms);
}

double marginal_loglik(const LsaParams& params, std::span<const ReturnObservation> data) {
  if (data.empty()) throw EmptyData("marginal likelihood needs at least one observation");
  const Eigen::MatrixXd log_theta = log_stick_break(params.betas);
  const Eigen::MatrixXd log_pi = params.pi.pi.array().log();
  Eigen::VectorXd log_dens(params.M);
  Eigen::MatrixXd terms(params.K, params.M);
  double total = 0.0;
  for (const auto& obs : data) {
    check_observation(params, obs);
    total += mixture_point(params, log_theta, log_pi.row(obs.receiver_id), obs, log_dens, terms);
  }
  return total;
}

double dirichlet_log_density(const Eigen::Ref<const Eigen::RowVectorXd>& p, double alpha0) {
  const double K = static_cast<double>(p.size());
  double lp = std::lgamma(K * alpha0) - K * std::lgamma(alpha0);
  if (alpha0 != 1.0) lp += (alpha0 - 1.0) * p.array().log().sum();
  return lp;
}

double gaussian_layer_log_prior(const GaussianLayer& layer) {
  const auto& pr = layer.priors;
  double lp = 0.0;
  for (const auto& c : layer.components) {
    for (Eigen::Index j = 0; j < c.alpha.size(); ++j) lp += normal_log_density(c.alpha.data()[j], pr.alpha_scale);
    lp += lkj2_log_density(c.correlation, pr.lkj_eta);
    for (int d = 0; d < kDims; ++d) lp += half_cauchy_log_density(c.scale_vec(d), pr.sigma_scale);
  }
  for (const auto& e : layer.eta)
    for (Eigen::Index j = 0; j < e.size(); ++j) lp += normal_log_density(e.data()[j], pr.eta_scale);
  for (const auto& d : layer.delta)
    for (Eigen::Index j = 0; j < d.size(); ++j) lp += normal_log_density(d.data()[j], pr.delta_scale);
  return lp;
}

double log_prior(const LsaParams& params) {
  params.pi.validate();
  double lp = 0.0;
  for (Eigen::Index j = 0; j < params.betas.beta.size(); ++j)
    lp += normal_log_density(params.betas.beta.data()[j], 1.0);
  for (Eigen::Index i = 0; i < params.pi.pi.rows(); ++i)
    lp += dirichlet_log_density(params.pi.pi.row(i), params.priors.alpha0);
  return lp + gaussian_layer_log_prior(params);
}

double log_posterior_unnorm(const LsaParams& params, std::span<const ReturnObservation> data) {
  return marginal_loglik(params, data) + log_prior(params);
}

// ---------------------------------------------------------------------------

namespace {

Eigen::Index packed_size(const LsaParams& p) {
  const Eigen::Index P = p.n_covariates();
  const Eigen::Index block = static_cast<Eigen::Index>(kDims) * P;
  return static_cast<Eigen::Index>(p.K) * (p.M - 1) + static_cast<Eigen::Index>(p.n_receivers()) * (p.K - 1) +
         p.M * (block + 3) + (p.n_receivers() + p.n_servers()) * block;
}

}  // namespace

Eigen::VectorXd pack_unconstrained(const LsaParams& params) {
  Eigen::VectorXd u(packed_size(params));
  Eigen::Index pos = 0;
  const Eigen::VectorXd ub = params.betas.to_unconstrained();
  u.segment(pos, ub.size()) = ub;
  pos += ub.size();
  for (Eigen::Index i = 0; i < params.pi.pi.rows(); ++i) {
    const double last = std::log(params.pi.pi(i, params.K - 1));
    for (int k = 0; k + 1 < params.K; ++k) u(pos++) = std::log(params.pi.pi(i, k)) - last;
  }
  for (const auto& c : params.components) {
    u.segment(pos, c.alpha.size()) = c.alpha.reshaped();
    pos += c.alpha.size();
    u(pos++) = std::log(c.scale_vec(0));
    u(pos++) = std::log(c.scale_vec(1));
    u(pos++) = std::atanh(c.correlation);
  }
  for (const auto& e : params.eta) {
    u.segment(pos, e.size()) = e.reshaped();
    pos += e.size();
  }
  for (const auto& d : params.delta) {
    u.segment(pos, d.size()) = d.reshaped();
    pos += d.size();
  }
  return u;
}

LsaParams unpack_unconstrained(const LsaParams& shape, const Eigen::Ref<const Eigen::VectorXd>& u) {
  if (u.size() != packed_size(shape)) throw DimensionMismatch("unconstrained vector has the wrong length");
  LsaParams out = shape;
  const int K = shape.K;
  const int M = shape.M;
  const Eigen::Index P = shape.n_covariates();
  Eigen::Index pos = 0;
  const Eigen::Index nb = static_cast<Eigen::Index>(K) * (M - 1);
  out.betas = StickBreakingBetas::from_unconstrained(K, M, u.segment(pos, nb));
  pos += nb;
  for (Eigen::Index i = 0; i < out.pi.pi.rows(); ++i) {
    Eigen::VectorXd z(K);
    for (int k = 0; k + 1 < K; ++k) z(k) = u(pos++);
    z(K - 1) = 0.0;
    const double lse = log_sum_exp(z);
    for (int k = 0; k < K; ++k) out.pi.pi(i, k) = std::exp(z(k) - lse);
  }
  for (auto& c : out.components) {
    Eigen::MatrixXd alpha = u.segment(pos, kDims * P).reshaped(kDims, P);
    pos += kDims * P;
    const Vec2 scales(std::exp(u(pos)), std::exp(u(pos + 1)));
    const double corr = std::tanh(u(pos + 2));
    pos += 3;
    c = GaussianComponent::from_scales(std::move(alpha), scales, corr);
  }
  for (auto& e : out.eta) {
    e = u.segment(pos, kDims * P).reshaped(kDims, P);
    pos += kDims * P;
  }
  for (auto& d : out.delta) {
    d = u.segment(pos, kDims * P).reshaped(kDims, P);
    pos += kDims * P;
  }
  return out;
}

Eigen::VectorXd log_posterior_gradient(const LsaParams& params, std::span<const ReturnObservation> data) {
  params.validate();
  const int K = params.K;
  const int M = params.M;
  const Eigen::Index P = params.n_covariates();
  const int R = params.n_receivers();
  const int S = params.n_servers();
  const auto& pr = params.priors;

  const PatternSimplex theta = stick_break(params.betas);
  const Eigen::MatrixXd log_theta = log_stick_break(params.betas);
  const Eigen::MatrixXd& pi = params.pi.pi;
  const Eigen::MatrixXd log_pi = pi.array().log();

  Eigen::MatrixXd d_pi = Eigen::MatrixXd::Zero(R, K);
  Eigen::MatrixXd d_theta = Eigen::MatrixXd::Zero(K, M);
  std::vector<Eigen::MatrixXd> d_alpha(M, Eigen::MatrixXd::Zero(kDims, P));
  std::vector<Eigen::MatrixXd> d_eta(R, Eigen::MatrixXd::Zero(kDims, P));
  std::vector<Eigen::MatrixXd> d_delta(S, Eigen::MatrixXd::Zero(kDims, P));
  Eigen::MatrixXd d_chol = Eigen::MatrixXd::Zero(M, 3);  // d/d(l00, l10, l11)

  Eigen::VectorXd log_dens(M);
  Eigen::MatrixXd terms(K, M);
  std::vector<Vec2> z(M);
  for (const auto& obs : data) {
    check_observation(params, obs);
    const int i = obs.receiver_id;
    const auto& eta = params.eta[i];
    const auto& delta = params.delta[obs.server_id];
    for (int m = 0; m < M; ++m) {
      const auto& c = params.components[m];
      const Vec2 e = obs.location - component_mean(c, eta, delta, obs.covariates);
      const Mat2& L = c.sigma_chol;
      z[m](0) = e(0) / L(0, 0);
      z[m](1) = (e(1) - L(1, 0) * z[m](0)) / L(1, 1);
      log_dens(m) = -kLogTwoPi - std::log(L(0, 0)) - std::log(L(1, 1)) - 0.5 * z[m].squaredNorm();
      for (int k = 0; k < K; ++k) terms(k, m) = log_pi(i, k) + log_theta(k, m) + log_dens(m);
    }
    const double lse = log_sum_exp(terms);
    Eigen::MatrixXd offset_grad = Eigen::MatrixXd::Zero(kDims, P);
    for (int m = 0; m < M; ++m) {
      const double scaled = std::exp(log_dens(m) - lse);
      double gamma_m = 0.0;
      for (int k = 0; k < K; ++k) {
        d_pi(i, k) += theta.theta(k, m) * scaled;
        d_theta(k, m) += pi(i, k) * scaled;
        gamma_m += std::exp(terms(k, m) - lse);
      }
      const Mat2& L = params.components[m].sigma_chol;
      // Sigma^{-1} e = L^{-T} z
      Vec2 w;
      w(1) = z[m](1) / L(1, 1);
      w(0) = (z[m](0) - L(1, 0) * w(1)) / L(0, 0);
      const Eigen::MatrixXd g = gamma_m * w * obs.covariates.transpose();
      d_alpha[m] += g;
      offset_grad += g;
      const double z0 = z[m](0), z1 = z[m](1);
      d_chol(m, 0) += gamma_m * (-1.0 / L(0, 0) + z0 * z0 / L(0, 0) - z1 * L(1, 0) * z0 / (L(1, 1) * L(0, 0)));
      d_chol(m, 1) += gamma_m * (z0 * z1 / L(1, 1));
      d_chol(m, 2) += gamma_m * (-1.0 / L(1, 1) + z1 * z1 / L(1, 1));
    }
    d_eta[i] += offset_grad;
    d_delta[obs.server_id] -= offset_grad;
  }

  Eigen::VectorXd grad(packed_size(params));
  Eigen::Index pos = 0;

  // Stick-breaking: d theta_km / d beta_kl, then to (first, log increments).
  const Eigen::MatrixXd& beta = params.betas.beta;
  for (int l = 0; l < M - 1; ++l) {
    Eigen::VectorXd g(K);
    for (int k = 0; k < K; ++k) {
      const double nu = sigmoid(beta(k, l));
      double acc = d_theta(k, l) * theta.theta(k, l) * (1.0 - nu);
      for (int m = l + 1; m < M; ++m) acc -= d_theta(k, m) * theta.theta(k, m) * nu;
      g(k) = acc - beta(k, l);
    }
    grad(pos++) = g.sum();
    for (int j = 1; j < K; ++j) grad(pos++) = (beta(j, l) - beta(j - 1, l)) * g.tail(K - j).sum();
  }

  // Style weights through the softmax with the last style as reference.
  for (int i = 0; i < R; ++i) {
    Eigen::VectorXd pg(K);
    for (int k = 0; k < K; ++k) pg(k) = pi(i, k) * d_pi(i, k) + (pr.alpha0 - 1.0);
    const double total = pg.sum();
    for (int k = 0; k + 1 < K; ++k) grad(pos++) = pg(k) - pi(i, k) * total;
  }

  for (int m = 0; m < M; ++m) {
    const auto& c = params.components[m];
    const Eigen::MatrixXd ga = d_alpha[m] - c.alpha / (pr.alpha_scale * pr.alpha_scale);
    grad.segment(pos, ga.size()) = ga.reshaped();
    pos += ga.size();
    const double s0 = c.scale_vec(0), s1 = c.scale_vec(1), r = c.correlation;
    const double tail = std::sqrt(1.0 - r * r);
    auto hc = [&](double s) {
      const double q = (s / pr.sigma_scale) * (s / pr.sigma_scale);
      return -2.0 * q / (1.0 + q);
    };
    grad(pos++) = d_chol(m, 0) * s0 + hc(s0);
    grad(pos++) = d_chol(m, 1) * s1 * r + d_chol(m, 2) * s1 * tail + hc(s1);
    grad(pos++) = d_chol(m, 1) * s1 * (1.0 - r * r) - d_chol(m, 2) * s1 * r * tail - 2.0 * r * (pr.lkj_eta - 1.0);
  }
  for (int i = 0; i < R; ++i) {
    const Eigen::MatrixXd g = d_eta[i] - params.eta[i] / (pr.eta_scale * pr.eta_scale);
    grad.segment(pos, g.size()) = g.reshaped();
    pos += g.size();
  }
  for (int s = 0; s < S; ++s) {
    const Eigen::MatrixXd g = d_delta[s] - params.delta[s] / (pr.delta_scale * pr.delta_scale);
    grad.segment(pos, g.size()) = g.reshaped();
    pos += g.size();
  }
  return grad;
}

}  // namespace lsa
