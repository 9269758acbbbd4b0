#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "lsa/sampler.hpp"
#include "lsa/selection.hpp"
#include "support/oracles.hpp"

using namespace lsa;

namespace {

SimConfig config(int K, int M, int R, int n, io::CovariateScheme scheme) {
  SimConfig cfg;
  cfg.K = K;
  cfg.M = M;
  cfg.R = R;
  cfg.S = R;
  cfg.n_obs_per_receiver = {n};
  cfg.covariate_scheme = scheme;
  return cfg;
}

// Inverse-CDF draws from a generalised Pareto distribution.
Eigen::VectorXd gpd_draws(int n, double k, double sigma, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Eigen::VectorXd x(n);
  for (int i = 0; i < n; ++i) {
    const double v = u(rng);
    x(i) = k == 0.0 ? -sigma * std::log1p(-v) : sigma / k * (std::pow(1.0 - v, -k) - 1.0);
  }
  return x;
}

CvSettings quick_cv(int folds = 5) {
  CvSettings cv;
  cv.folds = folds;
  cv.fit.n_restarts = 2;
  cv.fit.max_iters = 200;
  cv.fit.seed = 3;
  return cv;
}

}  // namespace

TEST_CASE("model spec labels") {
  CHECK(ModelSpec{ModelFamily::MVN, 1, 1}.label() == "mvn");
  CHECK(ModelSpec{ModelFamily::LSA, 3, 4}.label() == "lsa_K3_M4");
  CHECK(ModelSpec{ModelFamily::FiniteMixture, 1, 4}.label() == "finite_mixture_M4");
  CHECK(ModelSpec{ModelFamily::MixedMembership, 1, 2}.label() == "mixed_membership_M2");
  CHECK_THROWS(ModelSpec{ModelFamily::LSA, 0, 2}.validate());
}

TEST_CASE("ElpdReport sums and standard error") {
  Eigen::VectorXd pw(4);
  pw << -1.0, -2.0, -3.0, -6.0;
  const ElpdReport r = ElpdReport::from_pointwise("x", pw, ElpdMethod::KFold);
  CHECK(r.elpd_estimate == -12.0);
  // sample sd of (-1, -2, -3, -6) is sqrt(14 / 3)
  CHECK(r.se == doctest::Approx(2.0 * std::sqrt(14.0 / 3.0)).epsilon(1e-14));
}

TEST_CASE("fold assignment partitions each receiver across every fold") {
  Rng rng(1);
  const SimConfig cfg = config(2, 2, 6, 23, io::CovariateScheme::Intercept);
  const LsaParams p = draw_params(cfg, rng);
  const ObservationSet d = sample_dataset(p, cfg, rng).data;
  const auto folds = assign_folds(d, 5, 42);
  REQUIRE(folds.size() == d.size());
  CHECK(folds == assign_folds(d, 5, 42));
  CHECK(folds != assign_folds(d, 5, 43));
  for (int i = 0; i < 6; ++i) {
    std::vector<int> count(5, 0);
    for (std::size_t n = 0; n < d.size(); ++n)
      if (d.obs[n].receiver_id == i) ++count[static_cast<std::size_t>(folds[n])];
    // 23 points dealt round-robin: every fold gets 4 or 5
    for (int c : count) {
      CHECK(c >= 4);
      CHECK(c <= 5);
    }
  }
  CHECK_THROWS_AS(assign_folds(d, 24, 1), InsufficientDataPerFold);
  CHECK_THROWS(assign_folds(d, 1, 1));
}

TEST_CASE("oracle-mode ELPD agrees with the Monte Carlo expected log density") {
  Rng rng(2);
  const SimConfig cfg = config(2, 3, 10, 100, io::CovariateScheme::Full);
  const LsaParams p = draw_params(cfg, rng);
  const ObservationSet d = sample_dataset(p, cfg, rng).data;
  const ElpdReport rep = fixed_params_elpd(d, p, 5, 9);
  CHECK(rep.elpd_estimate == doctest::Approx(rep.pointwise.sum()).epsilon(1e-12));

  SimConfig big = cfg;
  big.n_obs_per_receiver = {20000};
  const ObservationSet mc = sample_dataset(p, big, rng).data;
  const double expected = marginal_loglik(p, mc.obs) / static_cast<double>(mc.size());
  CHECK(std::abs(rep.elpd_estimate - static_cast<double>(d.size()) * expected) < 2.0 * rep.se);
}

TEST_CASE("kfold_elpd is deterministic and sums its pointwise values") {
  Rng rng(3);
  const SimConfig cfg = config(2, 2, 6, 40, io::CovariateScheme::Intercept);
  const LsaParams p = draw_params(cfg, rng);
  const ObservationSet d = sample_dataset(p, cfg, rng).data;
  const ModelSpec spec{ModelFamily::LSA, 2, 2};
  CvSettings cv = quick_cv();
  const ElpdReport a = kfold_elpd(d, spec, cv);
  const ElpdReport b = kfold_elpd(d, spec, cv);
  cv.threads = 3;
  const ElpdReport c = kfold_elpd(d, spec, cv);
  CHECK(a.pointwise == b.pointwise);
  CHECK(a.pointwise == c.pointwise);
  CHECK(a.fold_assignments == b.fold_assignments);
  CHECK(a.elpd_estimate == b.elpd_estimate);
  CHECK(std::abs(a.elpd_estimate - a.pointwise.sum()) < 1e-9);
  CHECK(a.pointwise.size() == static_cast<Eigen::Index>(d.size()));
  CHECK(a.model_label == "lsa_K2_M2");
}

TEST_CASE("finite mixture beats MVN on bimodal data") {
  ObservationSet d;
  d.n_receivers = 5;
  d.n_servers = 1;
  d.n_covariates = 1;
  Rng rng(4);
  std::normal_distribution<double> z(0.0, 0.5);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 60; ++j) {
      ReturnObservation o;
      o.receiver_id = i;
      o.covariates = Eigen::VectorXd::Ones(1);
      o.location = Vec2(j % 2 == 0 ? -3.0 : 3.0, -5.0) + Vec2(z(rng), z(rng));
      d.obs.push_back(o);
    }
  const CvSettings cv = quick_cv();
  const ElpdReport mvn = kfold_elpd(d, ModelSpec{ModelFamily::MVN, 1, 1}, cv);
  const ElpdReport fm = kfold_elpd(d, ModelSpec{ModelFamily::FiniteMixture, 1, 2}, cv);
  const Eigen::VectorXd diff = fm.pointwise - mvn.pointwise;
  const double se_diff = ElpdReport::from_pointwise("diff", diff, ElpdMethod::KFold).se;
  CHECK(fm.elpd_estimate - mvn.elpd_estimate > 4.0 * se_diff);
}

TEST_CASE("grid search over one cell") {
  Rng rng(5);
  const SimConfig cfg = config(2, 2, 5, 30, io::CovariateScheme::Intercept);
  const LsaParams p = draw_params(cfg, rng);
  const ObservationSet d = sample_dataset(p, cfg, rng).data;
  std::vector<std::string> progress;
  const GridResult g = grid_search(d, {2, 2}, {3, 3}, quick_cv(3), [&](const std::string& s) { progress.push_back(s); });
  CHECK(g.entries.size() == 1);
  CHECK(g.best == std::pair(2, 3));
  CHECK(!progress.empty());
  CHECK_THROWS(grid_search(d, {3, 2}, {2, 2}, quick_cv(3)));
}

TEST_CASE("grid search best maximises ELPD") {
  Rng rng(6);
  const SimConfig cfg = config(2, 2, 5, 30, io::CovariateScheme::Intercept);
  const LsaParams p = draw_params(cfg, rng);
  const ObservationSet d = sample_dataset(p, cfg, rng).data;
  CvSettings cv = quick_cv(3);
  cv.threads = 2;
  const GridResult g = grid_search(d, {1, 2}, {1, 2}, cv);
  CHECK(g.entries.size() == 4);
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& [km, rep] : g.entries) best = std::max(best, rep.elpd_estimate);
  CHECK(g.entries.at(g.best).elpd_estimate == best);
  // the single-cell run reproduces the grid entry
  const GridResult one = grid_search(d, {2, 2}, {2, 2}, cv);
  CHECK(one.entries.at({2, 2}).pointwise == g.entries.at({2, 2}).pointwise);
}

TEST_CASE("compare_families returns the four families in order") {
  Rng rng(7);
  const SimConfig cfg = config(2, 2, 5, 30, io::CovariateScheme::Intercept);
  const LsaParams p = draw_params(cfg, rng);
  const ObservationSet d = sample_dataset(p, cfg, rng).data;
  const auto reps = compare_families(d, 2, 2, quick_cv(3));
  REQUIRE(reps.size() == 4);
  CHECK(reps[0].model_label == "mvn");
  CHECK(reps[1].model_label == "finite_mixture_M2");
  CHECK(reps[2].model_label == "mixed_membership_M2");
  CHECK(reps[3].model_label == "lsa_K2_M2");
  for (const auto& r : reps) CHECK(r.fold_assignments == reps[0].fold_assignments);
}

TEST_CASE("PSIS tail length") {
  CHECK(psis_tail_length(1000) == 95);
  CHECK(psis_tail_length(100) == 20);
  CHECK(psis_tail_length(10) == 2);
  CHECK(psis_tail_length(4000) == 190);
}

TEST_CASE("PSIS with equal weights") {
  const Eigen::VectorXd lw = Eigen::VectorXd::Constant(50, -2.5);
  const PsisResult r = psis_smooth(lw);
  CHECK(r.log_weights == lw);
  CHECK(r.pareto_k == -std::numeric_limits<double>::infinity());
  CHECK_THROWS(psis_smooth(Eigen::VectorXd::Zero(4)));
}

TEST_CASE("GPD fit recovers the shape of simulated exceedances") {
  Rng rng(8);
  for (double k : {-0.2, 0.2, 0.5, 0.9}) {
    const Eigen::VectorXd x = gpd_draws(20000, k, 1.5, rng);
    const auto [khat, sigma] = gpd_fit(x);
    CHECK(std::abs(khat - k) < 0.06);
    CHECK(std::abs(sigma - 1.5) < 0.1);
  }
}

TEST_CASE("PSIS flags heavy tails and smooths monotonically") {
  Rng rng(9);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Eigen::VectorXd lw(1000);
  for (int i = 0; i < 1000; ++i) lw(i) = -std::log(u(rng));  // Pareto(1) weights
  const PsisResult r = psis_smooth(lw);
  CHECK(r.pareto_k > 0.5);
  CHECK(r.log_weights.maxCoeff() <= lw.maxCoeff());
  // order preserved
  std::vector<int> idx(1000);
  for (int i = 0; i < 1000; ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](int a, int b) { return lw(a) < lw(b); });
  for (int j = 1; j < 1000; ++j) CHECK(r.log_weights(idx[j]) >= r.log_weights(idx[j - 1]));
  // only the tail changes
  int changed = 0;
  for (int i = 0; i < 1000; ++i) changed += r.log_weights(i) != lw(i);
  CHECK(changed <= psis_tail_length(1000));

  // light tails give a small shape estimate
  Eigen::VectorXd light(1000);
  std::normal_distribution<double> z(0.0, 0.3);
  for (int i = 0; i < 1000; ++i) light(i) = z(rng);
  CHECK(psis_smooth(light).pareto_k < 0.5);
}

TEST_CASE("PSIS-LOO with identical draws equals the pointwise log-likelihood") {
  Eigen::MatrixXd ll(200, 3);
  ll.col(0).setConstant(-1.0);
  ll.col(1).setConstant(-2.5);
  ll.col(2).setConstant(0.3);
  const PsisLooResult r = psis_loo(ll);
  CHECK(r.report.pointwise(0) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(r.report.pointwise(1) == doctest::Approx(-2.5).epsilon(1e-12));
  CHECK(r.report.pointwise(2) == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(r.report.method == ElpdMethod::PsisAtMode);
  CHECK(r.pareto_k.size() == 3);
}

TEST_CASE("PSIS-LOO close to raw importance sampling for light tails") {
  Rng rng(10);
  std::normal_distribution<double> z(0.0, 0.05);
  Eigen::MatrixXd ll(4000, 5);
  for (Eigen::Index i = 0; i < ll.size(); ++i) ll(i) = -1.0 + z(rng);
  const PsisLooResult r = psis_loo(ll);
  for (int n = 0; n < 5; ++n) {
    // raw IS-LOO: 1 / mean(1 / p)
    const double raw = -std::log((-ll.col(n).array()).exp().mean());
    CHECK(r.report.pointwise(n) == doctest::Approx(raw).epsilon(1e-3));
    CHECK(r.pareto_k(n) < 0.5);
  }
}
