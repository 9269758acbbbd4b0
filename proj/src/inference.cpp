#include "lsa/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <string>

#include <Eigen/Cholesky>

#include "em_driver.hpp"
#include "lsa/numerics.hpp"
#include "lsa/optimize.hpp"

namespace lsa {

Eigen::MatrixXd Responsibilities::pattern_totals() const {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(r.rows(), M);
  for (int k = 0; k < K; ++k) out += r.middleCols(static_cast<Eigen::Index>(k) * M, M);
  return out;
}

Eigen::MatrixXd Responsibilities::cell_counts() const {
  const Eigen::RowVectorXd col = r.colwise().sum();
  return col.reshaped(M, K).transpose();
}

void FitConfig::validate() const {
  validate_common();
  if (init_scheme == InitScheme::UserSupplied && !initial_params)
    throw Error("user-supplied initialisation without initial parameters");
}

void FitConfig::validate_common() const {
  if (max_iters < 1 || n_restarts < 1 || mean_sweeps < 1) throw Error("fit iteration counts must be positive");
  if (!(rel_tol > 0.0) || !(inner_opt.grad_tol > 0.0) || inner_opt.max_iters < 1)
    throw Error("fit tolerances must be positive");
  priors.validate();
}

// ---------------------------------------------------------------------------
// E-step

EStepResult e_step_with_loglik(const LsaParams& params, std::span<const ReturnObservation> data) {
  const int K = params.K;
  const int M = params.M;
  const Eigen::MatrixXd log_theta = log_stick_break(params.betas);
  const Eigen::MatrixXd log_pi = params.pi.pi.array().log();
  EStepResult out;
  out.resp.K = K;
  out.resp.M = M;
  out.resp.r.resize(static_cast<Eigen::Index>(data.size()), static_cast<Eigen::Index>(K) * M);
  out.loglik.resize(static_cast<Eigen::Index>(data.size()));
  Eigen::VectorXd log_dens(M);
  Eigen::MatrixXd terms(K, M);
  for (std::size_t n = 0; n < data.size(); ++n) {
    const auto& obs = data[n];
    pattern_log_densities(params, obs, log_dens);
    for (int k = 0; k < K; ++k)
      for (int m = 0; m < M; ++m) terms(k, m) = log_pi(obs.receiver_id, k) + log_theta(k, m) + log_dens(m);
    const double lse = log_sum_exp(terms);
    if (!std::isfinite(lse)) throw NumericalError("observation " + std::to_string(n) + " has zero likelihood");
    out.loglik(static_cast<Eigen::Index>(n)) = lse;
    for (int k = 0; k < K; ++k)
      for (int m = 0; m < M; ++m)
        out.resp.r(static_cast<Eigen::Index>(n), Responsibilities::index(k, m, M)) = std::exp(terms(k, m) - lse);
  }
  return out;
}

Responsibilities e_step(const LsaParams& params, std::span<const ReturnObservation> data) {
  params.validate();
  return e_step_with_loglik(params, data).resp;
}

// ---------------------------------------------------------------------------
// Weight updates

StyleSimplex m_step_pi(const Responsibilities& resp, std::span<const ReturnObservation> data, int n_receivers,
                       double alpha0) {
  const int K = resp.K;
  const int M = resp.M;
  if (resp.r.rows() != static_cast<Eigen::Index>(data.size())) throw DimensionMismatch("responsibility rows differ from data");
  Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(n_receivers, K);
  std::vector<int> seen(static_cast<std::size_t>(n_receivers), 0);
  for (std::size_t n = 0; n < data.size(); ++n) {
    const int i = data[n].receiver_id;
    ++seen[static_cast<std::size_t>(i)];
    for (int k = 0; k < K; ++k)
      counts(i, k) += resp.r.row(static_cast<Eigen::Index>(n)).segment(static_cast<Eigen::Index>(k) * M, M).sum();
  }
  StyleSimplex out{Eigen::MatrixXd(n_receivers, K)};
  for (int i = 0; i < n_receivers; ++i) {
    if (seen[static_cast<std::size_t>(i)] == 0)
      throw AllZeroRow("receiver " + std::to_string(i) + " has no observations");
    Eigen::RowVectorXd row = (counts.row(i).array() + (alpha0 - 1.0)).max(0.0);
    if (!(row.sum() > 0.0)) row = counts.row(i);
    out.pi.row(i) = row / row.sum();
  }
  return out;
}

namespace {

// One column of the stick-breaking objective in (first, log increments).
double stick_column_objective(const Eigen::VectorXd& a, const Eigen::VectorXd& b, const Eigen::VectorXd& u,
                              Eigen::VectorXd* grad) {
  const Eigen::Index K = u.size();
  Eigen::VectorXd beta(K);
  beta(0) = u(0);
  for (Eigen::Index k = 1; k < K; ++k) beta(k) = beta(k - 1) + std::exp(u(k));
  double f = 0.0;
  Eigen::VectorXd g(K);
  for (Eigen::Index k = 0; k < K; ++k) {
    const double bk = beta(k);
    if (a(k) != 0.0) f += a(k) * log_sigmoid(bk);
    if (b(k) != 0.0) f += b(k) * log_sigmoid(-bk);
    f += -0.5 * bk * bk - 0.5 * kLogTwoPi;
    g(k) = a(k) * sigmoid(-bk) - b(k) * sigmoid(bk) - bk;
  }
  if (grad) {
    grad->resize(K);
    (*grad)(0) = g.sum();
    for (Eigen::Index j = 1; j < K; ++j) (*grad)(j) = std::exp(u(j)) * g.tail(K - j).sum();
  }
  return f;
}

}  // namespace

double stick_objective(const Eigen::MatrixXd& counts, const StickBreakingBetas& betas) {
  const Eigen::MatrixXd log_theta = log_stick_break(betas);
  if (counts.rows() != log_theta.rows() || counts.cols() != log_theta.cols())
    throw DimensionMismatch("count matrix must be K x M");
  double f = 0.0;
  for (Eigen::Index j = 0; j < counts.size(); ++j)
    if (counts.data()[j] != 0.0) f += counts.data()[j] * log_theta.data()[j];
  for (Eigen::Index j = 0; j < betas.beta.size(); ++j) {
    const double b = betas.beta.data()[j];
    f += -0.5 * b * b - 0.5 * kLogTwoPi;
  }
  return f;
}

namespace {

StickBreakingBetas theta_ascent(const Eigen::MatrixXd& counts, const StickBreakingBetas& betas,
                                const InnerOptSettings& settings) {
  const int K = betas.styles();
  const int M = betas.patterns();
  StickBreakingBetas out = betas;
  const Eigen::VectorXd u_all = betas.to_unconstrained();
  for (int l = 0; l + 1 < M; ++l) {
    const Eigen::VectorXd a = counts.col(l);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(K);
    for (int m = l + 1; m < M; ++m) b += counts.col(m);
    const Eigen::VectorXd u0 = u_all.segment(static_cast<Eigen::Index>(l) * K, K);
    const OptimResult res = maximize_lbfgs(
        [&](const Eigen::VectorXd& u, Eigen::VectorXd* g) { return stick_column_objective(a, b, u, g); }, u0,
        settings.max_iters, settings.grad_tol);
    out.beta(0, l) = res.x(0);
    for (int k = 1; k < K; ++k) out.beta(k, l) = out.beta(k - 1, l) + std::exp(res.x(k));
  }
  try {
    out.validate();
  } catch (const OrderingViolation&) {
    // increments underflowed; keep the previous values
    throw InnerOptFailure("stick-breaking ascent produced a non-ascending column");
  }
  return out;
}

// Every order of n labels when n <= 4, otherwise the identity and each transposition.
std::vector<std::vector<int>> candidate_orders(int n) {
  std::vector<int> id(static_cast<std::size_t>(n));
  std::iota(id.begin(), id.end(), 0);
  std::vector<std::vector<int>> out;
  if (n <= 4) {
    std::vector<int> perm = id;
    do out.push_back(perm);
    while (std::next_permutation(perm.begin(), perm.end()));
    return out;
  }
  out.push_back(id);
  for (int a = 0; a < n; ++a)
    for (int b = a + 1; b < n; ++b) {
      std::vector<int> perm = id;
      std::swap(perm[static_cast<std::size_t>(a)], perm[static_cast<std::size_t>(b)]);
      out.push_back(std::move(perm));
    }
  return out;
}

}  // namespace

StickBreakingBetas m_step_theta(const Responsibilities& resp, const StickBreakingBetas& betas,
                                const InnerOptSettings& settings) {
  betas.validate();
  if (betas.styles() != resp.K || betas.patterns() != resp.M)
    throw DimensionMismatch("stick-breaking shape differs from responsibilities");
  return theta_ascent(resp.cell_counts(), betas, settings);
}

StickRelabeling m_step_theta_relabel(const Eigen::MatrixXd& counts, const StickBreakingBetas& betas,
                                     const InnerOptSettings& settings) {
  betas.validate();
  const int K = betas.styles();
  const int M = betas.patterns();
  if (counts.rows() != K || counts.cols() != M) throw DimensionMismatch("cell counts differ from the stick shape");

  StickRelabeling best;
  best.styles.resize(static_cast<std::size_t>(K));
  best.patterns.resize(static_cast<std::size_t>(M));
  std::iota(best.styles.begin(), best.styles.end(), 0);
  std::iota(best.patterns.begin(), best.patterns.end(), 0);
  best.betas = betas;
  double best_obj = stick_objective(counts, betas);

  const auto permuted = [&](const std::vector<int>& styles, const std::vector<int>& patterns) {
    Eigen::MatrixXd c(K, M);
    for (int k = 0; k < K; ++k)
      for (int m = 0; m < M; ++m) c(k, m) = counts(styles[static_cast<std::size_t>(k)], patterns[static_cast<std::size_t>(m)]);
    return c;
  };
  const auto consider = [&](const std::vector<int>& styles, const std::vector<int>& patterns) {
    const Eigen::MatrixXd c = permuted(styles, patterns);
    try {
      StickBreakingBetas b = theta_ascent(c, betas, settings);
      const double obj = stick_objective(c, b);
      if (obj > best_obj) {
        best_obj = obj;
        best.styles = styles;
        best.patterns = patterns;
        best.betas = std::move(b);
      }
    } catch (const InnerOptFailure&) {
    }
  };

  // identity first so that ties keep the current labels
  if (M > 1) {
    const std::vector<int> styles = best.styles;
    for (const auto& patterns : candidate_orders(M)) consider(styles, patterns);
  }
  if (K > 1 && M > 1) {
    const std::vector<int> patterns = best.patterns;
    for (const auto& styles : candidate_orders(K)) consider(styles, patterns);
  }
  return best;
}

Responsibilities relabel(const Responsibilities& resp, const std::vector<int>& styles,
                         const std::vector<int>& patterns) {
  Responsibilities out = resp;
  for (int k = 0; k < resp.K; ++k)
    for (int m = 0; m < resp.M; ++m)
      out.r.col(Responsibilities::index(k, m, resp.M)) =
          resp.r.col(Responsibilities::index(styles[static_cast<std::size_t>(k)], patterns[static_cast<std::size_t>(m)], resp.M));
  return out;
}

// ---------------------------------------------------------------------------
// Gaussian layer

namespace {

// A += kron(XX, Sinv) with the column-major vec(2 x P) layout.
void add_kron(Eigen::MatrixXd& A, const Eigen::MatrixXd& XX, const Mat2& Sinv) {
  const Eigen::Index P = XX.rows();
  for (Eigen::Index q = 0; q < P; ++q)
    for (Eigen::Index p = 0; p < P; ++p) A.block<2, 2>(p * 2, q * 2) += XX(p, q) * Sinv;
}

Eigen::MatrixXd ridge_solve(const Eigen::MatrixXd& A, const Eigen::VectorXd& b, Eigen::Index P) {
  Eigen::LLT<Eigen::MatrixXd> llt(A);
  if (llt.info() != Eigen::Success) throw NumericalError("normal equations are not positive definite");
  const Eigen::VectorXd sol = llt.solve(b);
  return sol.reshaped(kDims, P);
}

Mat2 inverse_from_chol(const Mat2& L) {
  const Mat2 Linv = L.triangularView<Eigen::Lower>().solve(Mat2::Identity());
  return Linv.transpose() * Linv;
}

double half_cauchy_kernel(double s, double scale) {
  const double u = s / scale;
  return -std::log1p(u * u);
}

// Covariance part of the expected complete-data objective plus its prior, in
// (log s0, log s1, atanh r). Constants are dropped.
double sigma_objective(double W, const Mat2& S, const Eigen::VectorXd& u, const PriorSettings& pr,
                       Eigen::VectorXd* grad) {
  const double s0 = std::exp(u(0));
  const double s1 = std::exp(u(1));
  const double r = std::tanh(u(2));
  const double tail = std::sqrt(std::max(0.0, 1.0 - r * r));
  Mat2 L;
  L << s0 + kCholeskyJitter, 0.0, s1 * r, s1 * tail + kCholeskyJitter;
  const Mat2 Sinv = inverse_from_chol(L);
  double f = -W * (std::log(L(0, 0)) + std::log(L(1, 1))) - 0.5 * (Sinv * S).trace();
  f += half_cauchy_kernel(s0, pr.sigma_scale) + half_cauchy_kernel(s1, pr.sigma_scale);
  if (pr.lkj_eta != 1.0) f += (pr.lkj_eta - 1.0) * std::log1p(-r * r);
  if (grad) {
    const Mat2 G = Sinv * S * Sinv * L;
    const double d00 = G(0, 0) - W / L(0, 0);
    const double d10 = G(1, 0);
    const double d11 = G(1, 1) - W / L(1, 1);
    auto hc = [&](double s) {
      const double q = (s / pr.sigma_scale) * (s / pr.sigma_scale);
      return -2.0 * q / (1.0 + q);
    };
    grad->resize(3);
    (*grad)(0) = d00 * s0 + hc(s0);
    (*grad)(1) = d10 * s1 * r + d11 * s1 * tail + hc(s1);
    (*grad)(2) = d10 * s1 * (1.0 - r * r) - d11 * s1 * r * tail - 2.0 * r * (pr.lkj_eta - 1.0);
  }
  return f;
}

GaussianComponent update_covariance(const GaussianComponent& current, double W, const Mat2& S,
                                    const PriorSettings& pr) {
  Eigen::VectorXd start(3);
  start << std::log(current.scale_vec(0)), std::log(current.scale_vec(1)), std::atanh(current.correlation);
  double best = sigma_objective(W, S, start, pr, nullptr);
  if (W > 1e-12) {
    const Mat2 C = S / W;
    if (C(0, 0) > 0.0 && C(1, 1) > 0.0) {
      const double a = std::sqrt(C(0, 0)), b = std::sqrt(C(1, 1));
      const double r = std::clamp(C(0, 1) / (a * b), -0.99, 0.99);
      Eigen::VectorXd cand(3);
      cand << std::log(a), std::log(b), std::atanh(r);
      const double f = sigma_objective(W, S, cand, pr, nullptr);
      if (std::isfinite(f) && f > best) {
        best = f;
        start = cand;
      }
    }
  }
  OptimResult res;
  try {
    res = maximize_lbfgs([&](const Eigen::VectorXd& u, Eigen::VectorXd* g) { return sigma_objective(W, S, u, pr, g); },
                         start, 100, 1e-9);
  } catch (const InnerOptFailure&) {
    return current;
  }
  const double r = std::tanh(res.x(2));
  if (!(std::abs(r) < 1.0)) return current;
  return GaussianComponent::from_scales(current.alpha, Vec2(std::exp(res.x(0)), std::exp(res.x(1))), r);
}

}  // namespace

GaussianUpdate m_step_gaussians_weighted(const Eigen::MatrixXd& W, std::span<const ReturnObservation> data,
                                         const GaussianLayer& current, int sweeps) {
  const int M = current.n_patterns();
  const int R = current.n_receivers();
  const int S = current.n_servers();
  const Eigen::Index P = current.n_covariates();
  const Eigen::Index DP = kDims * P;
  const auto N = static_cast<Eigen::Index>(data.size());
  if (W.rows() != N || W.cols() != M) throw DimensionMismatch("pattern weights must be N x M");
  const auto& pr = current.priors;

  GaussianUpdate up{current.components, current.eta, current.delta};
  std::vector<Mat2> Sinv(static_cast<std::size_t>(M));
  for (int m = 0; m < M; ++m) Sinv[m] = inverse_from_chol(current.components[m].sigma_chol);

  // Weighted x x^T sums, fixed for the whole M-step.
  const Eigen::MatrixXd zeroPP = Eigen::MatrixXd::Zero(P, P);
  std::vector<Eigen::MatrixXd> xx_rm(static_cast<std::size_t>(R) * M, zeroPP);
  std::vector<Eigen::MatrixXd> xx_sm(static_cast<std::size_t>(S) * M, zeroPP);
  std::vector<Eigen::MatrixXd> xx_m(static_cast<std::size_t>(M), zeroPP);
  for (Eigen::Index n = 0; n < N; ++n) {
    const auto& o = data[static_cast<std::size_t>(n)];
    const Eigen::MatrixXd xxT = o.covariates * o.covariates.transpose();
    for (int m = 0; m < M; ++m) {
      const double w = W(n, m);
      if (w == 0.0) continue;
      xx_rm[static_cast<std::size_t>(o.receiver_id) * M + m].noalias() += w * xxT;
      xx_sm[static_cast<std::size_t>(o.server_id) * M + m].noalias() += w * xxT;
    }
  }
  for (int r = 0; r < R; ++r)
    for (int m = 0; m < M; ++m) xx_m[m] += xx_rm[static_cast<std::size_t>(r) * M + m];

  const Eigen::MatrixXd zero2P = Eigen::MatrixXd::Zero(kDims, P);
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(DP, DP);
  for (int sweep = 0; sweep < sweeps; ++sweep) {
    // Pattern effects.
    {
      std::vector<Eigen::MatrixXd> E(static_cast<std::size_t>(M), zero2P);
      for (Eigen::Index n = 0; n < N; ++n) {
        const auto& o = data[static_cast<std::size_t>(n)];
        const Vec2 t = o.location - (up.eta[o.receiver_id] - up.delta[o.server_id]) * o.covariates;
        for (int m = 0; m < M; ++m)
          if (W(n, m) != 0.0) E[m].noalias() += W(n, m) * t * o.covariates.transpose();
      }
      for (int m = 0; m < M; ++m) {
        Eigen::MatrixXd A = I / (pr.alpha_scale * pr.alpha_scale);
        add_kron(A, xx_m[m], Sinv[m]);
        const Eigen::MatrixXd rhs = Sinv[m] * E[m];
        up.components[m].alpha = ridge_solve(A, rhs.reshaped(), P);
      }
    }
    // Receiver offsets.
    {
      std::vector<Eigen::MatrixXd> E(static_cast<std::size_t>(R) * M, zero2P);
      for (Eigen::Index n = 0; n < N; ++n) {
        const auto& o = data[static_cast<std::size_t>(n)];
        for (int m = 0; m < M; ++m) {
          if (W(n, m) == 0.0) continue;
          const Vec2 t = o.location - (up.components[m].alpha - up.delta[o.server_id]) * o.covariates;
          E[static_cast<std::size_t>(o.receiver_id) * M + m].noalias() += W(n, m) * t * o.covariates.transpose();
        }
      }
      for (int r = 0; r < R; ++r) {
        Eigen::MatrixXd A = I / (pr.eta_scale * pr.eta_scale);
        Eigen::MatrixXd rhs = zero2P;
        for (int m = 0; m < M; ++m) {
          add_kron(A, xx_rm[static_cast<std::size_t>(r) * M + m], Sinv[m]);
          rhs += Sinv[m] * E[static_cast<std::size_t>(r) * M + m];
        }
        up.eta[r] = ridge_solve(A, rhs.reshaped(), P);
      }
    }
    // Server offsets; the model subtracts them, so regress (alpha + eta) x - y.
    {
      std::vector<Eigen::MatrixXd> E(static_cast<std::size_t>(S) * M, zero2P);
      for (Eigen::Index n = 0; n < N; ++n) {
        const auto& o = data[static_cast<std::size_t>(n)];
        for (int m = 0; m < M; ++m) {
          if (W(n, m) == 0.0) continue;
          const Vec2 t = (up.components[m].alpha + up.eta[o.receiver_id]) * o.covariates - o.location;
          E[static_cast<std::size_t>(o.server_id) * M + m].noalias() += W(n, m) * t * o.covariates.transpose();
        }
      }
      for (int s = 0; s < S; ++s) {
        Eigen::MatrixXd A = I / (pr.delta_scale * pr.delta_scale);
        Eigen::MatrixXd rhs = zero2P;
        for (int m = 0; m < M; ++m) {
          add_kron(A, xx_sm[static_cast<std::size_t>(s) * M + m], Sinv[m]);
          rhs += Sinv[m] * E[static_cast<std::size_t>(s) * M + m];
        }
        up.delta[s] = ridge_solve(A, rhs.reshaped(), P);
      }
    }
  }

  // Covariances given the new means.
  std::vector<double> mass(static_cast<std::size_t>(M), 0.0);
  std::vector<Mat2> scatter(static_cast<std::size_t>(M), Mat2::Zero());
  for (Eigen::Index n = 0; n < N; ++n) {
    const auto& o = data[static_cast<std::size_t>(n)];
    for (int m = 0; m < M; ++m) {
      const double w = W(n, m);
      if (w == 0.0) continue;
      const Vec2 e = o.location - component_mean(up.components[m], up.eta[o.receiver_id], up.delta[o.server_id],
                                                 o.covariates);
      mass[m] += w;
      scatter[m].noalias() += w * e * e.transpose();
    }
  }
  for (int m = 0; m < M; ++m) up.components[m] = update_covariance(up.components[m], mass[m], scatter[m], pr);
  return up;
}

GaussianUpdate m_step_gaussians(const Responsibilities& resp, std::span<const ReturnObservation> data,
                                const GaussianLayer& current, int sweeps) {
  return m_step_gaussians_weighted(resp.pattern_totals(), data, current, sweeps);
}

double gaussian_layer_objective(const Eigen::MatrixXd& W, std::span<const ReturnObservation> data,
                                const GaussianLayer& layer) {
  Eigen::VectorXd log_dens(layer.n_patterns());
  double f = 0.0;
  for (std::size_t n = 0; n < data.size(); ++n) {
    pattern_log_densities(layer, data[n], log_dens);
    for (int m = 0; m < layer.n_patterns(); ++m) {
      const double w = W(static_cast<Eigen::Index>(n), m);
      if (w != 0.0) f += w * log_dens(m);
    }
  }
  return f + gaussian_layer_log_prior(layer);
}

double penalized_objective(const LsaParams& params, std::span<const ReturnObservation> data) {
  return log_posterior_unnorm(params, data);
}

// ---------------------------------------------------------------------------
// Initialisation

std::vector<int> kmeans_then_merge(std::span<const ReturnObservation> data, int n_centers, int n_groups, Rng& rng) {
  const auto N = static_cast<int>(data.size());
  if (N == 0) throw EmptyData("cannot initialise from an empty dataset");
  n_centers = std::max(1, std::min(n_centers, N));
  n_groups = std::max(1, std::min(n_groups, n_centers));

  // k-means++ seeding.
  std::vector<Vec2> centers;
  centers.reserve(static_cast<std::size_t>(n_centers));
  centers.push_back(data[static_cast<std::size_t>(std::uniform_int_distribution<int>(0, N - 1)(rng))].location);
  Eigen::RowVectorXd d2(N);
  for (int n = 0; n < N; ++n) d2(n) = (data[n].location - centers[0]).squaredNorm();
  while (static_cast<int>(centers.size()) < n_centers) {
    const int pick = d2.sum() > 0.0 ? categorical_draw(rng, d2) : std::uniform_int_distribution<int>(0, N - 1)(rng);
    centers.push_back(data[static_cast<std::size_t>(pick)].location);
    for (int n = 0; n < N; ++n) d2(n) = std::min(d2(n), (data[n].location - centers.back()).squaredNorm());
  }

  // Lloyd iterations.
  std::vector<int> label(static_cast<std::size_t>(N), -1);
  std::vector<int> count(static_cast<std::size_t>(n_centers), 0);
  for (int iter = 0; iter < 50; ++iter) {
    bool changed = false;
    for (int n = 0; n < N; ++n) {
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (int c = 0; c < n_centers; ++c) {
        const double d = (data[n].location - centers[c]).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      if (label[n] != best) {
        label[n] = best;
        changed = true;
      }
    }
    std::vector<Vec2> sums(static_cast<std::size_t>(n_centers), Vec2::Zero());
    std::fill(count.begin(), count.end(), 0);
    for (int n = 0; n < N; ++n) {
      sums[label[n]] += data[n].location;
      ++count[label[n]];
    }
    for (int c = 0; c < n_centers; ++c)
      if (count[c] > 0) centers[c] = sums[c] / count[c];
    if (!changed) break;
  }

  // Ward merging down to n_groups.
  std::vector<int> group(static_cast<std::size_t>(n_centers));
  for (int c = 0; c < n_centers; ++c) group[c] = c;
  std::vector<double> w(count.begin(), count.end());
  std::vector<bool> alive(static_cast<std::size_t>(n_centers), true);
  int n_alive = n_centers;
  while (n_alive > n_groups) {
    int ba = -1, bb = -1;
    double best = std::numeric_limits<double>::infinity();
    for (int a = 0; a < n_centers; ++a) {
      if (!alive[a]) continue;
      for (int b = a + 1; b < n_centers; ++b) {
        if (!alive[b]) continue;
        const double tot = w[a] + w[b];
        const double cost = tot > 0.0 ? w[a] * w[b] / tot * (centers[a] - centers[b]).squaredNorm() : 0.0;
        if (cost < best) {
          best = cost;
          ba = a;
          bb = b;
        }
      }
    }
    const double tot = w[ba] + w[bb];
    if (tot > 0.0) centers[ba] = (w[ba] * centers[ba] + w[bb] * centers[bb]) / tot;
    w[ba] = tot;
    alive[bb] = false;
    for (int& g : group)
      if (g == bb) g = ba;
    --n_alive;
  }
  std::vector<int> compact(static_cast<std::size_t>(n_centers), -1);
  int next = 0;
  for (int c = 0; c < n_centers; ++c)
    if (alive[c]) compact[c] = next++;
  std::vector<int> out(static_cast<std::size_t>(N));
  for (int n = 0; n < N; ++n) out[n] = compact[group[label[n]]];
  return out;
}

GaussianLayer layer_from_labels(std::span<const ReturnObservation> data, const std::vector<int>& labels,
                                int n_groups, int n_receivers, int n_servers, int n_covariates,
                                const PriorSettings& priors) {
  const auto N = static_cast<Eigen::Index>(data.size());
  Vec2 mean_all = Vec2::Zero();
  for (const auto& o : data) mean_all += o.location;
  mean_all /= static_cast<double>(N);
  Mat2 cov_all = Mat2::Zero();
  for (const auto& o : data) cov_all += (o.location - mean_all) * (o.location - mean_all).transpose();
  cov_all /= static_cast<double>(std::max<Eigen::Index>(1, N - 1));

  GaussianLayer layer;
  layer.priors = priors;
  for (int g = 0; g < n_groups; ++g) {
    Vec2 mu = Vec2::Zero();
    int cnt = 0;
    for (Eigen::Index n = 0; n < N; ++n)
      if (labels[static_cast<std::size_t>(n)] == g) {
        mu += data[static_cast<std::size_t>(n)].location;
        ++cnt;
      }
    Mat2 cov = cov_all / std::max(1, n_groups);
    if (cnt > 0) mu /= cnt;
    else mu = mean_all;
    if (cnt >= 3) {
      Mat2 c = Mat2::Zero();
      for (Eigen::Index n = 0; n < N; ++n)
        if (labels[static_cast<std::size_t>(n)] == g) {
          const Vec2 e = data[static_cast<std::size_t>(n)].location - mu;
          c += e * e.transpose();
        }
      cov = c / (cnt - 1);
    }
    const double a = std::max(0.05, std::sqrt(std::max(0.0, cov(0, 0))));
    const double b = std::max(0.05, std::sqrt(std::max(0.0, cov(1, 1))));
    const double r = std::clamp(cov(0, 1) / (a * b), -0.9, 0.9);
    Eigen::MatrixXd alpha = Eigen::MatrixXd::Zero(kDims, n_covariates);
    alpha.col(0) = mu;
    layer.components.push_back(GaussianComponent::from_scales(std::move(alpha), Vec2(a, b), r));
  }
  layer.eta.assign(static_cast<std::size_t>(n_receivers), Eigen::MatrixXd::Zero(kDims, n_covariates));
  layer.delta.assign(static_cast<std::size_t>(n_servers), Eigen::MatrixXd::Zero(kDims, n_covariates));
  return layer;
}

GaussianLayer prior_draw_layer(int n_patterns, int n_receivers, int n_servers, int n_covariates,
                               const PriorSettings& priors, Rng& rng) {
  GaussianLayer layer;
  layer.priors = priors;
  for (int m = 0; m < n_patterns; ++m) {
    Eigen::MatrixXd alpha(kDims, n_covariates);
    for (Eigen::Index j = 0; j < alpha.size(); ++j) alpha.data()[j] = priors.alpha_scale * standard_normal(rng);
    // a tiny floor keeps a near-zero half-Cauchy draw from starting degenerate
    const Vec2 scales(half_cauchy_draw(rng, priors.sigma_scale) + 1e-3, half_cauchy_draw(rng, priors.sigma_scale) + 1e-3);
    const double r = std::clamp(2.0 * beta_draw(rng, priors.lkj_eta, priors.lkj_eta) - 1.0, -0.99, 0.99);
    layer.components.push_back(GaussianComponent::from_scales(std::move(alpha), scales, r));
  }
  layer.eta.assign(static_cast<std::size_t>(n_receivers), Eigen::MatrixXd::Zero(kDims, n_covariates));
  layer.delta.assign(static_cast<std::size_t>(n_servers), Eigen::MatrixXd::Zero(kDims, n_covariates));
  return layer;
}

StickBreakingBetas random_ordered_betas(int K, int M, Rng& rng) {
  StickBreakingBetas b;
  b.beta.resize(K, M - 1);
  for (int l = 0; l + 1 < M; ++l) {
    Eigen::VectorXd col(K);
    do {
      for (int k = 0; k < K; ++k) col(k) = standard_normal(rng);
      std::sort(col.begin(), col.end());
    } while (std::adjacent_find(col.begin(), col.end()) != col.end());
    b.beta.col(l) = col;
  }
  return b;
}

namespace detail {

double min_axis_sd(const GaussianComponent& comp) {
  const Mat2 cov = comp.covariance();
  const double half_tr = 0.5 * cov.trace();
  const double det_cov = cov(0, 0) * cov(1, 1) - cov(0, 1) * cov(1, 0);
  const double lmax = half_tr + std::sqrt(std::max(0.0, half_tr * half_tr - det_cov));
  // det from the Cholesky diagonal stays accurate when cov is nearly singular
  const double det = std::pow(comp.sigma_chol(0, 0) * comp.sigma_chol(1, 1), 2);
  return std::sqrt(det / lmax);
}

bool rescue_empty_patterns(GaussianLayer& layer, const Eigen::VectorXd& pattern_mass, const Eigen::VectorXd& loglik,
                           std::span<const ReturnObservation> data) {
  const double threshold = 1e-6 * static_cast<double>(data.size());
  bool changed = false;
  Eigen::VectorXd ll = loglik;
  for (int m = 0; m < layer.n_patterns(); ++m) {
    const bool collapsed = min_axis_sd(layer.components[m]) < kCollapsedScale;
    if (pattern_mass(m) >= threshold && !collapsed) continue;
    Eigen::Index worst = 0;
    ll.minCoeff(&worst);
    const auto& o = data[static_cast<std::size_t>(worst)];
    ll(worst) = std::numeric_limits<double>::infinity();  // next rescue picks another point
    auto& comp = layer.components[m];
    Eigen::MatrixXd alpha = Eigen::MatrixXd::Zero(kDims, layer.n_covariates());
    alpha.col(0) = o.location - (layer.eta[o.receiver_id] - layer.delta[o.server_id]) * o.covariates;
    comp = GaussianComponent::from_scales(std::move(alpha), Vec2(0.5, 0.5), 0.0);
    changed = true;
  }
  return changed;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Fitting

namespace {

struct LsaModel {
  using Params = LsaParams;
  const ObservationSet& data;
  int K;
  int M;
  const FitConfig& cfg;

  Params init(Rng& rng, int /*restart*/) const {
    switch (cfg.init_scheme) {
      case InitScheme::UserSupplied: {
        LsaParams p = *cfg.initial_params;
        p.priors = cfg.priors;
        p.validate();
        if (p.K != K || p.M != M || p.n_receivers() != data.n_receivers || p.n_servers() != data.n_servers ||
            p.n_covariates() != data.n_covariates)
          throw DimensionMismatch("initial parameters do not match the data");
        return p;
      }
      case InitScheme::PriorDraw: {
        LsaParams p;
        static_cast<GaussianLayer&>(p) =
            prior_draw_layer(M, data.n_receivers, data.n_servers, data.n_covariates, cfg.priors, rng);
        p.K = K;
        p.M = M;
        p.betas = random_ordered_betas(K, M, rng);
        p.pi.pi.resize(data.n_receivers, K);
        for (int i = 0; i < data.n_receivers; ++i) p.pi.pi.row(i) = dirichlet_draw(rng, K, cfg.priors.alpha0);
        return p;
      }
      case InitScheme::KMeansPatternMeans: break;
    }
    const std::vector<int> labels = kmeans_then_merge(data.obs, K * M, M, rng);
    LsaParams p;
    static_cast<GaussianLayer&>(p) =
        layer_from_labels(data.obs, labels, M, data.n_receivers, data.n_servers, data.n_covariates, cfg.priors);
    p.K = K;
    p.M = M;
    p.pi.pi = Eigen::MatrixXd::Constant(data.n_receivers, K, 1.0 / K);
    p.betas = random_ordered_betas(K, M, rng);
    return p;
  }

  EStepResult e_step(const Params& p) const { return e_step_with_loglik(p, data.obs); }

  double log_prior(const Params& p) const { return lsa::log_prior(p); }

  Params m_step(const Params& p, const EStepResult& es, bool& rescued) const {
    Params next = p;
    Responsibilities resp = es.resp;
    if (cfg.relabel) {
      StickRelabeling rl = m_step_theta_relabel(resp.cell_counts(), p.betas, cfg.inner_opt);
      resp = relabel(resp, rl.styles, rl.patterns);
      for (int m = 0; m < M; ++m) next.components[m] = p.components[rl.patterns[static_cast<std::size_t>(m)]];
      next.betas = std::move(rl.betas);
    } else {
      try {
        next.betas = m_step_theta(resp, p.betas, cfg.inner_opt);
      } catch (const InnerOptFailure&) {
        next.betas = p.betas;
      }
    }
    next.pi = m_step_pi(resp, data.obs, data.n_receivers, p.priors.alpha0);
    const Eigen::MatrixXd W = resp.pattern_totals();
    GaussianUpdate up = m_step_gaussians_weighted(W, data.obs, next, cfg.mean_sweeps);
    next.components = std::move(up.components);
    next.eta = std::move(up.eta);
    next.delta = std::move(up.delta);
    rescued = detail::rescue_empty_patterns(next, W.colwise().sum().transpose(), es.loglik, data.obs);
    return next;
  }
};

}  // namespace

FitReport fit(const ObservationSet& data, int K, int M, const FitConfig& cfg_in) {
  cfg_in.validate();
  if (K < 1 || M < 1) throw Error("K and M must be at least 1");
  if (data.empty()) throw EmptyData("cannot fit an empty dataset");
  data.validate();
  FitConfig cfg = cfg_in;
  LsaModel model{data, K, M, cfg};
  FitReport report = detail::fit_with_restarts(model, cfg);
  if (cfg.gradient_polish && report.params.pi.pi.minCoeff() > 0.0) {
    LsaParams polished = gradient_refine(report.params, data.obs, cfg.max_iters);
    EStepResult es = e_step_with_loglik(polished, data.obs);
    const double obj = es.loglik.sum() + log_prior(polished);
    if (obj > report.objective()) {
      report.params = std::move(polished);
      report.responsibilities = std::move(es.resp);
      report.per_point_loglik = std::move(es.loglik);
      report.objective_trace.push_back(obj);
    }
  }
  return report;
}

LsaParams gradient_refine(const LsaParams& params, std::span<const ReturnObservation> data, int max_iters,
                          double grad_tol) {
  const Eigen::VectorXd u0 = pack_unconstrained(params);
  if (!u0.allFinite()) return params;
  auto objective = [&](const Eigen::VectorXd& u, Eigen::VectorXd* g) -> double {
    try {
      const LsaParams p = unpack_unconstrained(params, u);
      const double f = log_posterior_unnorm(p, data);
      if (g) *g = log_posterior_gradient(p, data);
      return f;
    } catch (const Error&) {
      if (g) *g = Eigen::VectorXd::Zero(u.size());
      return kNegInf;
    }
  };
  try {
    const OptimResult res = maximize_lbfgs(objective, u0, max_iters, grad_tol, 10);
    return unpack_unconstrained(params, res.x);
  } catch (const InnerOptFailure&) {
    return params;
  }
}

std::vector<std::pair<int, int>> map_pattern_assignments(const Responsibilities& resp) {
  std::vector<std::pair<int, int>> out;
  out.reserve(static_cast<std::size_t>(resp.r.rows()));
  for (Eigen::Index n = 0; n < resp.r.rows(); ++n) {
    int best = 0;
    for (int j = 1; j < resp.r.cols(); ++j)
      if (resp.r(n, j) > resp.r(n, best)) best = j;
    out.emplace_back(best / resp.M, best % resp.M);
  }
  return out;
}

std::vector<std::pair<int, int>> map_pattern_assignments(const FitReport& report) {
  return map_pattern_assignments(report.responsibilities);
}

}  // namespace lsa
