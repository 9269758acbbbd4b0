#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/LU>

#include "em_driver.hpp"
#include "lsa/inference.hpp"
#include "lsa/sampler.hpp"
#include "support/oracles.hpp"

using namespace lsa;

namespace {

Responsibilities make_resp(const Eigen::MatrixXd& r, int K, int M) {
  Responsibilities out;
  out.r = r;
  out.K = K;
  out.M = M;
  return out;
}

std::vector<ReturnObservation> receivers_only(const std::vector<int>& ids) {
  std::vector<ReturnObservation> v;
  for (int i : ids) {
    ReturnObservation o;
    o.receiver_id = i;
    o.covariates = Eigen::VectorXd::Ones(1);
    v.push_back(o);
  }
  return v;
}

// log N(b; 0, 1) summed plus sum counts * log theta, all from the oracle.
double stick_objective_oracle(const Eigen::MatrixXd& counts, const Eigen::MatrixXd& beta) {
  const Eigen::MatrixXd theta = lsa::test::stick_break_oracle(beta);
  double v = 0.0;
  for (Eigen::Index k = 0; k < counts.rows(); ++k)
    for (Eigen::Index m = 0; m < counts.cols(); ++m)
      if (counts(k, m) > 0.0) v += counts(k, m) * std::log(theta(k, m));
  for (Eigen::Index j = 0; j < beta.size(); ++j)
    v += -0.5 * std::log(2.0 * std::numbers::pi) - 0.5 * beta(j) * beta(j);
  return v;
}

SimulatedData structured_data(int K, int M, int R, int n, std::uint64_t seed, LsaParams& truth) {
  StructuredTruthOptions opt;
  opt.K = K;
  opt.M = M;
  opt.R = R;
  opt.S = R;
  opt.scheme = io::CovariateScheme::Intercept;
  Rng rng(seed);
  truth = structured_truth(opt, rng);
  SimConfig cfg;
  cfg.K = K;
  cfg.M = M;
  cfg.R = R;
  cfg.S = R;
  cfg.n_obs_per_receiver = {n};
  cfg.covariate_scheme = io::CovariateScheme::Intercept;
  return sample_dataset(truth, cfg, rng);
}

// Intercept mean of pattern m for the average receiver and server. The split
// between alpha and the offsets is only fixed by the prior, this sum is not.
Vec2 average_pattern_mean(const LsaParams& p, int m) {
  Vec2 mu = p.components[m].alpha.col(0);
  for (const auto& e : p.eta) mu += e.col(0) / static_cast<double>(p.eta.size());
  for (const auto& d : p.delta) mu -= d.col(0) / static_cast<double>(p.delta.size());
  return mu;
}

// Sum of average-mean distances after Hungarian alignment.
double aligned_mean_distance(const LsaParams& fit, const LsaParams& truth) {
  const int M = truth.M;
  Eigen::MatrixXd cost(M, M);
  for (int a = 0; a < M; ++a)
    for (int b = 0; b < M; ++b)
      cost(a, b) = (average_pattern_mean(truth, a) - average_pattern_mean(fit, b)).norm();
  const auto perm = lsa::test::hungarian(cost);
  double d = 0.0;
  for (int a = 0; a < M; ++a) d += cost(a, perm[a]);
  return d;
}

// One-hot weights on the most responsible pattern under the generating parameters.
Eigen::MatrixXd one_hot_true_patterns(const LsaParams& truth, const ObservationSet& d) {
  const Eigen::MatrixXd pt = e_step(truth, d.obs).pattern_totals();
  Eigen::MatrixXd W = Eigen::MatrixXd::Zero(pt.rows(), pt.cols());
  for (Eigen::Index n = 0; n < pt.rows(); ++n) {
    Eigen::Index m;
    pt.row(n).maxCoeff(&m);
    W(n, m) = 1.0;
  }
  return W;
}

}  // namespace

TEST_CASE("e_step: single component gives unit responsibilities") {
  Rng rng(1);
  const LsaParams p = lsa::test::random_params(1, 1, 3, 3, 2, rng);
  const ObservationSet d = lsa::test::random_observations(p, 50, rng);
  const Responsibilities r = e_step(p, d.obs);
  CHECK(r.r.rows() == 50);
  CHECK(r.r.cols() == 1);
  CHECK((r.r.array() == 1.0).all());
}

TEST_CASE("e_step: symmetric parameters give uniform responsibilities") {
  Rng rng(2);
  LsaParams p = lsa::test::random_params(1, 3, 2, 2, 1, rng);
  for (auto& c : p.components) c = p.components[0];
  // K = 1 with the stick-breaking values chosen to give a uniform theta row
  p.betas.beta(0, 0) = std::log(1.0 / 2.0);  // theta_1 = 1/3
  p.betas.beta(0, 1) = 0.0;                   // theta_2 = (2/3)(1/2)
  const ObservationSet d = lsa::test::random_observations(p, 30, rng);
  const Responsibilities r = e_step(p, d.obs);
  CHECK((r.r.array() - 1.0 / 3.0).abs().maxCoeff() < 1e-12);

  // two styles with uniform pi; stick-breaking values are nearly equal
  LsaParams q = lsa::test::random_params(2, 2, 2, 2, 1, rng);
  q.components[1] = q.components[0];
  q.betas.beta << -1e-13, 1e-13;
  q.pi.pi.setConstant(0.5);
  const Responsibilities rq = e_step(q, d.obs);
  CHECK((rq.r.array() - 0.25).abs().maxCoeff() < 1e-12);
}

TEST_CASE("e_step matches linear-space normalisation") {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    const LsaParams p = lsa::test::random_params(2, 2, 3, 3, 2, rng);
    const ObservationSet d = lsa::test::random_observations(p, 20, rng);
    const EStepResult es = e_step_with_loglik(p, d.obs);
    for (std::size_t n = 0; n < d.size(); ++n) {
      const Eigen::RowVectorXd oracle = lsa::test::lsa_responsibilities_linear(p, d.obs[n]);
      CHECK((es.resp.r.row(static_cast<Eigen::Index>(n)) - oracle).cwiseAbs().maxCoeff() < 1e-10);
      CHECK(es.loglik(static_cast<Eigen::Index>(n)) ==
            doctest::Approx(std::log(lsa::test::lsa_likelihood_linear(p, d.obs[n]))).epsilon(1e-12));
    }
    CHECK((es.resp.r.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-10);
    CHECK(es.resp.r.minCoeff() >= 0.0);
    CHECK(es.resp.r.maxCoeff() <= 1.0);
  }
}

TEST_CASE("responsibility totals") {
  Eigen::MatrixXd r(2, 4);
  r << 0.1, 0.2, 0.3, 0.4, 0.25, 0.25, 0.25, 0.25;
  const Responsibilities resp = make_resp(r, 2, 2);
  Eigen::MatrixXd pt(2, 2);
  pt << 0.4, 0.6, 0.5, 0.5;
  CHECK((resp.pattern_totals() - pt).norm() < 1e-15);
  Eigen::MatrixXd cc(2, 2);
  cc << 0.35, 0.45, 0.55, 0.65;
  CHECK((resp.cell_counts() - cc).norm() < 1e-15);
}

TEST_CASE("m_step_pi closed forms") {
  // alpha0 = 1: empirical proportions
  Eigen::MatrixXd r(4, 2);
  r << 1, 0, 1, 0, 1, 0, 0, 1;
  const auto data = receivers_only({0, 0, 0, 0});
  StyleSimplex pi = m_step_pi(make_resp(r, 2, 1), data, 1, 1.0);
  CHECK(pi.pi(0, 0) == doctest::Approx(0.75));
  CHECK(pi.pi(0, 1) == doctest::Approx(0.25));

  // alpha0 = 2, counts (3, 1)
  pi = m_step_pi(make_resp(r, 2, 1), data, 1, 2.0);
  CHECK(pi.pi(0, 0) == doctest::Approx(4.0 / 6.0).epsilon(1e-14));
  CHECK(pi.pi(0, 1) == doctest::Approx(2.0 / 6.0).epsilon(1e-14));

  // all mass on the second of three styles
  Eigen::MatrixXd r3 = Eigen::MatrixXd::Zero(3, 3);
  r3.col(1).setOnes();
  pi = m_step_pi(make_resp(r3, 3, 1), receivers_only({0, 0, 0}), 1, 1.0);
  CHECK(pi.pi(0, 0) == 0.0);
  CHECK(pi.pi(0, 1) == 1.0);
  CHECK(pi.pi(0, 2) == 0.0);

  // alpha0 < 1 floors at zero
  Eigen::MatrixXd r4(2, 2);
  r4 << 1, 0, 1, 0;
  pi = m_step_pi(make_resp(r4, 2, 1), receivers_only({0, 0}), 1, 0.5);
  CHECK(pi.pi(0, 1) == 0.0);
  CHECK(pi.pi(0, 0) == 1.0);

  // a receiver with no observations
  CHECK_THROWS_AS(m_step_pi(make_resp(r4, 2, 1), receivers_only({0, 0}), 2, 1.0), AllZeroRow);
}

TEST_CASE("m_step_theta: symmetric split gives a zero stick value") {
  Eigen::MatrixXd r(100, 2);
  r.setConstant(0.5);
  const StickBreakingBetas b0{Eigen::MatrixXd::Constant(1, 1, 1.7)};
  const StickBreakingBetas b = m_step_theta(make_resp(r, 1, 2), b0);
  CHECK(std::abs(b.beta(0, 0)) < 1e-6);
  const Eigen::MatrixXd t = stick_break(b).theta;
  CHECK(t(0, 0) == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("m_step_theta keeps the ordering against opposing evidence") {
  const int K = 3, M = 3;
  Eigen::MatrixXd r = Eigen::MatrixXd::Zero(200, K * M);
  for (int n = 0; n < 100; ++n) r(n, Responsibilities::index(K - 1, 0, M)) = 1.0;
  for (int n = 100; n < 200; ++n) r(n, Responsibilities::index(0, M - 1, M)) = 1.0;
  Rng rng(4);
  const StickBreakingBetas b0 = random_ordered_betas(K, M, rng);
  const StickBreakingBetas b = m_step_theta(make_resp(r, K, M), b0);
  b.validate();
  const Eigen::MatrixXd t = stick_break(b).theta;
  for (int k = 1; k < K; ++k) CHECK(t(k, 0) > t(k - 1, 0));
  const Eigen::MatrixXd counts = make_resp(r, K, M).cell_counts();
  CHECK(stick_objective(counts, b) >= stick_objective(counts, b0));
}

TEST_CASE("m_step_theta matches a dense grid search") {
  Rng rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 3; ++trial) {
    // style 1 leans to pattern 0 and style 0 to pattern 1, so the optimum is interior
    Eigen::MatrixXd r(40, 4);
    for (int n = 0; n < 40; ++n) {
      for (int j = 0; j < 4; ++j) r(n, j) = u(rng);
      r(n, Responsibilities::index(0, 1, 2)) *= 3.0;
      r(n, Responsibilities::index(1, 0, 2)) *= 3.0;
      r.row(n) /= r.row(n).sum();
    }
    const Responsibilities resp = make_resp(r, 2, 2);
    const Eigen::MatrixXd counts = resp.cell_counts();
    StickBreakingBetas b0{Eigen::MatrixXd(2, 1)};
    b0.beta << -0.3, 0.3;
    const StickBreakingBetas fitted = m_step_theta(resp, b0);
    const double fitted_obj = stick_objective_oracle(counts, fitted.beta);
    CHECK(stick_objective(counts, fitted) == doctest::Approx(fitted_obj).epsilon(1e-12));

    double best = -std::numeric_limits<double>::infinity();
    Eigen::MatrixXd beta(2, 1);
    for (int i = 0; i <= 1600; ++i)
      for (int j = 1; j <= 1600; ++j) {
        beta(0, 0) = -4.0 + 0.005 * i;
        beta(1, 0) = beta(0, 0) + 0.005 * j;
        best = std::max(best, stick_objective_oracle(counts, beta));
      }
    CHECK(fitted_obj >= best - 1e-9);
    CHECK(std::abs(fitted_obj - best) < 1e-3);
  }
}

TEST_CASE("m_step_gaussians: single pattern reduces to the sample moments") {
  Rng rng(6);
  LsaParams p = lsa::test::random_params(1, 1, 1, 1, 1, rng);
  const ObservationSet d = lsa::test::random_observations(p, 400, rng);
  GaussianLayer cur = p;
  cur.priors.alpha_scale = 1e8;
  cur.priors.eta_scale = 1e-8;
  cur.priors.delta_scale = 1e-8;
  cur.priors.sigma_scale = 1e8;
  cur.eta[0].setZero();
  cur.delta[0].setZero();
  const GaussianUpdate up = m_step_gaussians_weighted(Eigen::MatrixXd::Ones(400, 1), d.obs, cur);
  Vec2 mean = Vec2::Zero();
  for (const auto& o : d.obs) mean += o.location;
  mean /= 400.0;
  Mat2 cov = Mat2::Zero();
  for (const auto& o : d.obs) cov += (o.location - mean) * (o.location - mean).transpose();
  cov /= 400.0;
  CHECK((up.components[0].alpha.col(0) - mean).norm() < 1e-6);
  CHECK((up.components[0].covariance() - cov).cwiseAbs().maxCoeff() < 1e-5);
  CHECK(up.eta[0].norm() < 1e-6);
}

TEST_CASE("m_step_gaussians: pattern effects match per-pattern weighted least squares") {
  Rng rng(7);
  const LsaParams truth = lsa::test::random_params(2, 3, 4, 3, 2, rng);
  const ObservationSet d = lsa::test::random_observations(truth, 600, rng);
  const Eigen::MatrixXd W = one_hot_true_patterns(truth, d);
  // offsets stay at their current values for the first block
  const GaussianUpdate up = m_step_gaussians_weighted(W, d.obs, truth, 1);
  for (int m = 0; m < 3; ++m) {
    const Mat2 Sinv = truth.components[m].covariance().inverse();
    Eigen::MatrixXd A = Eigen::MatrixXd::Identity(4, 4) / std::pow(truth.priors.alpha_scale, 2);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(4);
    for (std::size_t n = 0; n < d.size(); ++n) {
      if (W(static_cast<Eigen::Index>(n), m) == 0.0) continue;
      const auto& o = d.obs[n];
      Eigen::MatrixXd D = Eigen::MatrixXd::Zero(2, 4);  // vec(alpha) -> alpha x
      for (int p = 0; p < 2; ++p)
        for (int dim = 0; dim < 2; ++dim) D(dim, 2 * p + dim) = o.covariates(p);
      const Vec2 y = o.location - (truth.eta[o.receiver_id] - truth.delta[o.server_id]) * o.covariates;
      A += D.transpose() * Sinv * D;
      b += D.transpose() * Sinv * y;
    }
    const Eigen::VectorXd oracle = A.ldlt().solve(b);
    CHECK((up.components[m].alpha.reshaped() - oracle).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("m_step_gaussians: repeated sweeps reach the joint ridge solution") {
  Rng rng(7);
  LsaParams truth = lsa::test::random_params(2, 3, 4, 3, 2, rng);
  truth.priors.eta_scale = 0.5;
  truth.priors.delta_scale = 0.5;
  const ObservationSet d = lsa::test::random_observations(truth, 600, rng);
  const Eigen::MatrixXd W = one_hot_true_patterns(truth, d);
  GaussianLayer cur = truth;
  for (auto& e : cur.eta) e.setZero();
  for (auto& e : cur.delta) e.setZero();
  const GaussianUpdate up = m_step_gaussians_weighted(W, d.obs, cur, 2000);
  std::vector<Mat2> covs;
  for (const auto& c : cur.components) covs.push_back(c.covariance());
  const Eigen::VectorXd oracle = lsa::test::joint_ridge_oracle(d, W, covs, cur.priors.alpha_scale,
                                                               cur.priors.eta_scale, cur.priors.delta_scale);
  const int B = 4;
  for (int m = 0; m < 3; ++m)
    CHECK((up.components[m].alpha.reshaped() - oracle.segment(m * B, B)).cwiseAbs().maxCoeff() < 1e-6);
  for (int r = 0; r < 4; ++r)
    CHECK((up.eta[r].reshaped() - oracle.segment((3 + r) * B, B)).cwiseAbs().maxCoeff() < 1e-6);
  for (int s = 0; s < 3; ++s)
    CHECK((up.delta[s].reshaped() - oracle.segment((7 + s) * B, B)).cwiseAbs().maxCoeff() < 1e-6);

  // the whole update never lowers the expected complete-data objective
  GaussianLayer next = cur;
  next.components = up.components;
  next.eta = up.eta;
  next.delta = up.delta;
  CHECK(gaussian_layer_objective(W, d.obs, next) >= gaussian_layer_objective(W, d.obs, cur) - 1e-9);
}

TEST_CASE("m_step_gaussians: wider prior moves effects toward least squares") {
  Rng rng(8);
  const LsaParams truth = lsa::test::random_params(1, 2, 1, 1, 1, rng);
  const ObservationSet d = lsa::test::random_observations(truth, 30, rng);
  Eigen::MatrixXd W(30, 2);
  for (int n = 0; n < 30; ++n) {
    W(n, 0) = n % 2;
    W(n, 1) = 1 - n % 2;
  }
  GaussianLayer cur = truth;
  for (auto& c : cur.components) c = GaussianComponent::from_scales(c.alpha, Vec2(1.5, 0.8), 0.0);
  cur.priors.eta_scale = 1e-8;
  cur.priors.delta_scale = 1e-8;
  cur.eta[0].setZero();
  cur.delta[0].setZero();
  for (int m = 0; m < 2; ++m) {
    Vec2 ls = Vec2::Zero();
    double w = 0.0;
    for (int n = 0; n < 30; ++n) {
      ls += W(n, m) * d.obs[n].location;
      w += W(n, m);
    }
    ls /= w;
    double prev_gap[2] = {std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
    for (double scale : {0.05, 0.1, 0.2, 0.4, 0.8}) {
      GaussianLayer c = cur;
      c.priors.alpha_scale = scale;
      const GaussianUpdate up = m_step_gaussians_weighted(W, d.obs, c);
      for (int dim = 0; dim < 2; ++dim) {
        const double gap = std::abs(up.components[m].alpha(dim, 0) - ls(dim));
        CHECK(gap < prev_gap[dim]);
        prev_gap[dim] = gap;
      }
    }
  }
}

TEST_CASE("fit: single style and pattern recovers the normal MLE") {
  LsaParams truth;
  truth.K = 1;
  truth.M = 1;
  truth.betas.beta.resize(1, 0);
  truth.pi.pi = Eigen::MatrixXd::Ones(1, 1);
  Eigen::MatrixXd alpha(2, 1);
  alpha << 0.4, -5.5;
  truth.components.push_back(GaussianComponent::from_scales(alpha, Vec2(0.9, 1.3), 0.35));
  truth.eta.assign(1, Eigen::MatrixXd::Zero(2, 1));
  truth.delta.assign(1, Eigen::MatrixXd::Zero(2, 1));
  SimConfig sc;
  sc.K = 1;
  sc.M = 1;
  sc.R = 1;
  sc.S = 1;
  sc.n_obs_per_receiver = {1200};
  sc.covariate_scheme = io::CovariateScheme::Intercept;
  Rng rng(9);
  const ObservationSet d = sample_dataset(truth, sc, rng).data;

  FitConfig cfg;
  cfg.n_restarts = 2;
  cfg.rel_tol = 1e-10;
  cfg.max_iters = 2000;
  const FitReport rep = fit(d, 1, 1, cfg);

  Vec2 mean = Vec2::Zero();
  for (const auto& o : d.obs) mean += o.location;
  mean /= static_cast<double>(d.size());
  Mat2 cov = Mat2::Zero();
  for (const auto& o : d.obs) cov += (o.location - mean) * (o.location - mean).transpose();
  cov /= static_cast<double>(d.size());

  // overall fitted mean for the average receiver and server
  Vec2 fitted = Vec2::Zero();
  for (const auto& o : d.obs)
    fitted += component_mean(rep.params.components[0], rep.params.eta[o.receiver_id], rep.params.delta[o.server_id],
                             o.covariates);
  fitted /= static_cast<double>(d.size());
  const Mat2 tc = truth.components[0].covariance();
  for (int dim = 0; dim < 2; ++dim)
    CHECK(std::abs(fitted(dim) - alpha(dim, 0)) < 3.0 * std::sqrt(tc(dim, dim) / static_cast<double>(d.size())));

  LsaParams mle = truth;
  mle.components[0] = GaussianComponent::from_scales(mean, Vec2(std::sqrt(cov(0, 0)), std::sqrt(cov(1, 1))),
                                                     cov(0, 1) / std::sqrt(cov(0, 0) * cov(1, 1)));
  const double ll_mle = marginal_loglik(mle, d.obs);
  const double ll_fit = marginal_loglik(rep.params, d.obs);
  CHECK(rep.objective() >= penalized_objective(mle, d.obs) - 1e-8);
  CHECK(ll_fit <= ll_mle + 1e-6);
  CHECK(ll_mle - ll_fit <= log_prior(rep.params) - log_prior(mle) + 1e-6);
  CHECK(rep.per_point_loglik.sum() == doctest::Approx(ll_fit).epsilon(1e-12));
  CHECK(rep.objective() == doctest::Approx(ll_fit + log_prior(rep.params)).epsilon(1e-12));
}

TEST_CASE("fit: monotone objective on random synthetic instances") {
  for (int inst = 0; inst < 20; ++inst) {
    const int K = 1 + inst % 3, M = 2 + (inst / 3) % 3;
    Rng rng(100 + inst);
    const LsaParams truth = lsa::test::random_params(K, M, 6, 4, 2, rng, 1.5);
    const ObservationSet d = lsa::test::random_observations(truth, 300, rng);
    FitConfig cfg;
    cfg.n_restarts = 2;
    cfg.max_iters = 150;
    cfg.seed = 1000 + inst;
    cfg.init_scheme = inst % 2 == 0 ? InitScheme::KMeansPatternMeans : InitScheme::PriorDraw;
    const FitReport rep = fit(d, K, M, cfg);
    REQUIRE(rep.restart_traces.size() == 2);
    for (std::size_t r = 0; r < 2; ++r) {
      const auto& tr = rep.restart_traces[r];
      const auto& rescues = rep.restart_rescues[r];
      REQUIRE(tr.size() >= 2);
      for (std::size_t t = 1; t < tr.size(); ++t) {
        const bool rescued = std::find(rescues.begin(), rescues.end(), static_cast<int>(t)) != rescues.end();
        if (!rescued) CHECK(tr[t] >= tr[t - 1] - 1e-8);
      }
    }
    CHECK(rep.restart_traces[static_cast<std::size_t>(rep.best_restart)] == rep.objective_trace);
    rep.params.validate();
    const Eigen::MatrixXd th = stick_break(rep.params.betas).theta;
    for (int k = 1; k < K; ++k) CHECK(th(k, 0) > th(k - 1, 0));
    CHECK((rep.responsibilities.r.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-10);
    CHECK(rep.per_point_loglik.sum() == doctest::Approx(marginal_loglik(rep.params, d.obs)).epsilon(1e-12));
    CHECK(rep.restart_objectives.size() == 2);
  }
}

TEST_CASE("fit: converged EM is a stationary point") {
  LsaParams truth;
  const ObservationSet d = structured_data(2, 2, 10, 150, 21, truth).data;
  FitConfig cfg;
  cfg.n_restarts = 1;
  cfg.rel_tol = 1e-12;
  cfg.max_iters = 5000;
  cfg.gradient_polish = true;
  const FitReport rep = fit(d, 2, 2, cfg);
  const Eigen::VectorXd g = log_posterior_gradient(rep.params, d.obs);
  CHECK(g.norm() < 1e-3 * std::abs(rep.objective()));
}

TEST_CASE("fit is deterministic and independent of the thread count") {
  LsaParams truth;
  const ObservationSet d = structured_data(2, 3, 8, 80, 22, truth).data;
  FitConfig cfg;
  cfg.n_restarts = 3;
  cfg.max_iters = 100;
  cfg.seed = 5;
  const FitReport a = fit(d, 2, 3, cfg);
  cfg.threads = 3;
  const FitReport b = fit(d, 2, 3, cfg);
  CHECK(a.objective_trace == b.objective_trace);
  CHECK(a.restart_objectives == b.restart_objectives);
  CHECK(a.params.betas.beta == b.params.betas.beta);
  CHECK(a.params.pi.pi == b.params.pi.pi);
  CHECK(a.responsibilities.r == b.responsibilities.r);
  CHECK(a.n_iters == b.n_iters);
  CHECK(a.best_restart == b.best_restart);
}

TEST_CASE("fit: recovery improves with more points per receiver") {
  double dist[3] = {0, 0, 0};
  const int sizes[3] = {125, 250, 500};
  for (int rep = 0; rep < 3; ++rep) {
    for (int s = 0; s < 3; ++s) {
      LsaParams truth;
      const ObservationSet d = structured_data(3, 3, 20, sizes[s], 300 + rep, truth).data;
      FitConfig cfg;
      cfg.n_restarts = 2;
      cfg.seed = 7 + rep;
      const FitReport r = fit(d, 3, 3, cfg);
      dist[s] += aligned_mean_distance(r.params, truth);
    }
  }
  CHECK(dist[1] <= dist[0]);
  CHECK(dist[2] <= dist[1]);
}

TEST_CASE("fit: user-supplied initialisation and validation") {
  Rng rng(23);
  const LsaParams truth = lsa::test::random_params(2, 2, 3, 3, 1, rng);
  const ObservationSet d = lsa::test::random_observations(truth, 100, rng);
  FitConfig cfg;
  cfg.init_scheme = InitScheme::UserSupplied;
  CHECK_THROWS(fit(d, 2, 2, cfg));
  cfg.initial_params = truth;
  cfg.n_restarts = 1;
  const FitReport rep = fit(d, 2, 2, cfg);
  CHECK(rep.objective_trace.front() <= rep.objective());
  CHECK_THROWS(fit(d, 3, 2, cfg));

  FitConfig bad;
  bad.rel_tol = 0.0;
  CHECK_THROWS(bad.validate());
  bad = FitConfig{};
  bad.n_restarts = 0;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("map_pattern_assignments") {
  Eigen::MatrixXd r(4, 4);
  r << 0, 0, 1, 0,            // one-hot (1, 0)
      0, 0.5, 0.5, 0,         // tie between (0, 1) and (1, 0)
      0.25, 0.25, 0.25, 0.25,  // all tied
      0.1, 0.2, 0.3, 0.4;
  const auto a = map_pattern_assignments(make_resp(r, 2, 2));
  CHECK(a[0] == std::pair(1, 0));
  CHECK(a[1] == std::pair(0, 1));
  CHECK(a[2] == std::pair(0, 0));
  CHECK(a[3] == std::pair(1, 1));

  Rng rng(24);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Eigen::MatrixXd rr(200, 6);
  for (Eigen::Index i = 0; i < rr.size(); ++i) rr(i) = u(rng);
  const auto b = map_pattern_assignments(make_resp(rr, 2, 3));
  for (int n = 0; n < 200; ++n) {
    int best = 0;
    for (int j = 1; j < 6; ++j)
      if (rr(n, j) > rr(n, best)) best = j;
    CHECK(b[n] == std::pair(best / 3, best % 3));
  }
}

TEST_CASE("gradient_refine never lowers the objective") {
  Rng rng(25);
  const LsaParams p = lsa::test::random_params(2, 2, 3, 3, 1, rng);
  const ObservationSet d = lsa::test::random_observations(p, 80, rng);
  const LsaParams q = gradient_refine(p, d.obs, 200);
  CHECK(penalized_objective(q, d.obs) >= penalized_objective(p, d.obs));
}

TEST_CASE("kmeans_then_merge separates distant clusters") {
  std::vector<ReturnObservation> pts;
  Rng rng(26);
  std::normal_distribution<double> z(0.0, 0.3);
  const Vec2 centres[3] = {Vec2(-10, 0), Vec2(0, 10), Vec2(10, 0)};
  std::vector<int> truth;
  for (int c = 0; c < 3; ++c)
    for (int j = 0; j < 50; ++j) {
      ReturnObservation o;
      o.location = centres[c] + Vec2(z(rng), z(rng));
      o.covariates = Eigen::VectorXd::Ones(1);
      pts.push_back(o);
      truth.push_back(c);
    }
  const auto labels = kmeans_then_merge(pts, 9, 3, rng);
  CHECK(lsa::test::adjusted_rand_index(labels, truth) == doctest::Approx(1.0));
}

TEST_CASE("min_axis_sd is the square root of the smallest covariance eigenvalue") {
  Rng rng(77);
  std::uniform_real_distribution<double> scale(1e-3, 3.0), corr(-0.999, 0.999);
  for (int t = 0; t < 200; ++t) {
    const auto comp = GaussianComponent::from_scales(Eigen::MatrixXd::Zero(2, 1), Vec2(scale(rng), scale(rng)),
                                                     corr(rng));
    const Eigen::SelfAdjointEigenSolver<Mat2> eig(comp.covariance());
    const double expected = std::sqrt(eig.eigenvalues()(0));
    CHECK(std::abs(detail::min_axis_sd(comp) - expected) <= 1e-7 * expected + 1e-12);
  }
  const auto line = GaussianComponent::from_scales(Eigen::MatrixXd::Zero(2, 1), Vec2(1.0, 1.0), 0.999999999);
  CHECK(detail::min_axis_sd(line) < detail::kCollapsedScale);
}

TEST_CASE("m_step_theta_relabel keeps labels that already fit the ordering") {
  StickBreakingBetas b;
  b.beta = (Eigen::MatrixXd(3, 2) << -2.0, -2.0, 0.0, 2.0, 2.0, 2.2).finished();
  const Eigen::MatrixXd theta = stick_break(b).theta;
  const Eigen::MatrixXd counts = 1000.0 * theta;
  const StickRelabeling rl = m_step_theta_relabel(counts, b);
  CHECK(rl.styles == std::vector<int>{0, 1, 2});
  CHECK(rl.patterns == std::vector<int>{0, 1, 2});
}

TEST_CASE("m_step_theta_relabel escapes a binding ordering constraint") {
  StickBreakingBetas truth;
  truth.beta = (Eigen::MatrixXd(3, 2) << -2.5, -2.5, -2.4, 2.5, 2.6, 3.0).finished();
  const Eigen::MatrixXd true_counts = 500.0 * stick_break(truth).theta;
  // same cells with the pattern labels rotated
  const std::vector<int> rot{2, 0, 1};
  Eigen::MatrixXd counts(3, 3);
  for (int k = 0; k < 3; ++k)
    for (int m = 0; m < 3; ++m) counts(k, rot[m]) = true_counts(k, m);
  StickBreakingBetas start;
  start.beta = (Eigen::MatrixXd(3, 2) << -0.5, -0.5, 0.0, 0.0, 0.5, 0.5).finished();

  const auto as_resp = [](const Eigen::MatrixXd& c) {
    const Eigen::MatrixXd row = c.transpose().reshaped(1, c.size());
    return make_resp(row, static_cast<int>(c.rows()), static_cast<int>(c.cols()));
  };
  const double fixed_obj = stick_objective(counts, m_step_theta(as_resp(counts), start));
  const double true_order_obj = stick_objective(true_counts, m_step_theta(as_resp(true_counts), start));
  const StickRelabeling rl = m_step_theta_relabel(counts, start);
  Eigen::MatrixXd relabelled(3, 3);
  for (int k = 0; k < 3; ++k)
    for (int m = 0; m < 3; ++m) relabelled(k, m) = counts(rl.styles[k], rl.patterns[m]);
  const double obj = stick_objective(relabelled, rl.betas);
  CHECK(obj > fixed_obj + 1.0);
  CHECK(obj >= true_order_obj - 1e-9);
}

TEST_CASE("relabel permutes responsibility columns") {
  Eigen::MatrixXd r(1, 6);
  r << 0.1, 0.2, 0.3, 0.05, 0.15, 0.2;  // K = 2, M = 3
  const Responsibilities out = relabel(make_resp(r, 2, 3), {1, 0}, {2, 0, 1});
  Eigen::MatrixXd expected(1, 6);
  expected << 0.2, 0.05, 0.15, 0.3, 0.1, 0.2;
  CHECK(out.r == expected);
  CHECK(out.cell_counts().sum() == doctest::Approx(1.0));
}
