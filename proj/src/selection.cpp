#include "lsa/selection.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>

#include "lsa/numerics.hpp"
#include "lsa/parallel.hpp"
#include "lsa/random.hpp"

namespace lsa {

std::string_view to_string(ModelFamily f) {
  switch (f) {
    case ModelFamily::MVN: return "mvn";
    case ModelFamily::FiniteMixture: return "finite_mixture";
    case ModelFamily::MixedMembership: return "mixed_membership";
    case ModelFamily::LSA: return "lsa";
  }
  return "unknown";
}

std::string ModelSpec::label() const {
  switch (family) {
    case ModelFamily::MVN: return "mvn";
    case ModelFamily::FiniteMixture: return "finite_mixture_M" + std::to_string(M);
    case ModelFamily::MixedMembership: return "mixed_membership_M" + std::to_string(M);
    case ModelFamily::LSA: return "lsa_K" + std::to_string(K) + "_M" + std::to_string(M);
  }
  return "unknown";
}

void ModelSpec::validate() const {
  if (family == ModelFamily::LSA && K < 1) throw Error("LSA needs K >= 1");
  if (family != ModelFamily::MVN && M < 1) throw Error("mixture families need M >= 1");
}

ElpdReport ElpdReport::from_pointwise(std::string label, Eigen::VectorXd pointwise, ElpdMethod method,
                                      std::vector<int> folds) {
  ElpdReport r;
  r.model_label = std::move(label);
  r.method = method;
  r.fold_assignments = std::move(folds);
  const auto n = pointwise.size();
  r.elpd_estimate = pointwise.sum();
  if (n > 1) {
    const double mean = r.elpd_estimate / static_cast<double>(n);
    const double var = (pointwise.array() - mean).square().sum() / static_cast<double>(n - 1);
    r.se = std::sqrt(static_cast<double>(n) * var);
  }
  r.pointwise = std::move(pointwise);
  return r;
}

std::vector<int> assign_folds(const ObservationSet& data, int folds, std::uint64_t seed) {
  if (folds < 2) throw Error("at least two folds are required");
  std::vector<std::vector<int>> by_receiver(static_cast<std::size_t>(data.n_receivers));
  for (std::size_t n = 0; n < data.obs.size(); ++n)
    by_receiver.at(static_cast<std::size_t>(data.obs[n].receiver_id)).push_back(static_cast<int>(n));
  std::vector<int> out(data.obs.size(), -1);
  for (int i = 0; i < data.n_receivers; ++i) {
    auto& idx = by_receiver[static_cast<std::size_t>(i)];
    if (idx.empty()) continue;
    if (static_cast<int>(idx.size()) < folds)
      throw InsufficientDataPerFold("receiver " + std::to_string(i) + " has " + std::to_string(idx.size()) +
                                    " observations, fewer than " + std::to_string(folds) + " folds");
    Rng rng = make_stream(seed, "folds", static_cast<std::uint64_t>(i));
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t j = 0; j < idx.size(); ++j)
      out[static_cast<std::size_t>(idx[j])] = static_cast<int>((j + static_cast<std::size_t>(i)) % folds);
  }
  return out;
}

namespace {

ObservationSet subset(const ObservationSet& data, const std::vector<int>& folds, int fold, bool keep) {
  ObservationSet out;
  out.n_receivers = data.n_receivers;
  out.n_servers = data.n_servers;
  out.n_covariates = data.n_covariates;
  for (std::size_t n = 0; n < data.obs.size(); ++n)
    if ((folds[n] == fold) == keep) out.obs.push_back(data.obs[n]);
  return out;
}

FitConfig fold_config(const CvSettings& cv, int fold) {
  FitConfig cfg = cv.fit;
  cfg.seed = derive_seed(cv.fit.seed, "fold", static_cast<std::uint64_t>(fold));
  cfg.threads = 1;
  return cfg;
}

// Held-out log predictive densities for one (spec, fold).
Eigen::VectorXd score_fold(const ObservationSet& data, const std::vector<int>& folds, int fold,
                           const ModelSpec& spec, const CvSettings& cv) {
  const ObservationSet train = subset(data, folds, fold, false);
  const ObservationSet test = subset(data, folds, fold, true);
  const FitConfig cfg = fold_config(cv, fold);
  Eigen::VectorXd out(static_cast<Eigen::Index>(test.obs.size()));
  if (spec.family == ModelFamily::LSA) {
    const FitReport rep = fit(train, spec.K, spec.M, cfg);
    for (std::size_t n = 0; n < test.obs.size(); ++n)
      out(static_cast<Eigen::Index>(n)) = marginal_loglik_point(rep.params, test.obs[n]);
  } else {
    BaselineKind kind;
    kind.tag = spec.family == ModelFamily::MVN             ? BaselineFamily::MVN
               : spec.family == ModelFamily::FiniteMixture ? BaselineFamily::FiniteMixture
                                                           : BaselineFamily::MixedMembership;
    kind.M = spec.M;
    const BaselineFitReport rep = baseline_fit(train, kind, cfg);
    for (std::size_t n = 0; n < test.obs.size(); ++n)
      out(static_cast<Eigen::Index>(n)) = baseline_loglik_point(rep.params, test.obs[n]);
  }
  return out;
}

void scatter_fold(Eigen::VectorXd& pointwise, const std::vector<int>& folds, int fold, const Eigen::VectorXd& vals) {
  Eigen::Index j = 0;
  for (std::size_t n = 0; n < folds.size(); ++n)
    if (folds[n] == fold) pointwise(static_cast<Eigen::Index>(n)) = vals(j++);
}

std::vector<ElpdReport> run_specs(const ObservationSet& data, const std::vector<ModelSpec>& specs,
                                  const CvSettings& cv, const ProgressFn& progress) {
  if (data.empty()) throw EmptyData("no observations to cross-validate");
  data.validate();
  for (const auto& s : specs) s.validate();
  const std::vector<int> folds = assign_folds(data, cv.folds, cv.fit.seed);
  const std::size_t n_tasks = specs.size() * static_cast<std::size_t>(cv.folds);
  std::vector<Eigen::VectorXd> scores(n_tasks);
  std::atomic<std::size_t> done{0};
  parallel_for(n_tasks, cv.threads, [&](std::size_t t) {
    const std::size_t s = t / static_cast<std::size_t>(cv.folds);
    const int f = static_cast<int>(t % static_cast<std::size_t>(cv.folds));
    scores[t] = score_fold(data, folds, f, specs[s], cv);
    const std::size_t d = ++done;
    if (progress)
      progress(specs[s].label() + " fold " + std::to_string(f + 1) + "/" + std::to_string(cv.folds) + " done (" +
               std::to_string(d) + "/" + std::to_string(n_tasks) + ")");
  });
  std::vector<ElpdReport> out;
  for (std::size_t s = 0; s < specs.size(); ++s) {
    Eigen::VectorXd pw(static_cast<Eigen::Index>(data.obs.size()));
    for (int f = 0; f < cv.folds; ++f)
      scatter_fold(pw, folds, f, scores[s * static_cast<std::size_t>(cv.folds) + static_cast<std::size_t>(f)]);
    out.push_back(ElpdReport::from_pointwise(specs[s].label(), std::move(pw), ElpdMethod::KFold, folds));
  }
  return out;
}

}  // namespace

ElpdReport kfold_elpd(const ObservationSet& data, const ModelSpec& spec, const CvSettings& cv) {
  return run_specs(data, {spec}, cv, {}).front();
}

ElpdReport fixed_params_elpd(const ObservationSet& data, const LsaParams& params, int folds, std::uint64_t seed) {
  params.validate();
  std::vector<int> assignment = assign_folds(data, folds, seed);
  Eigen::VectorXd pw(static_cast<Eigen::Index>(data.obs.size()));
  for (std::size_t n = 0; n < data.obs.size(); ++n)
    pw(static_cast<Eigen::Index>(n)) = marginal_loglik_point(params, data.obs[n]);
  return ElpdReport::from_pointwise("fixed", std::move(pw), ElpdMethod::KFold, std::move(assignment));
}

GridResult grid_search(const ObservationSet& data, std::pair<int, int> K_range, std::pair<int, int> M_range,
                       const CvSettings& cv, const ProgressFn& progress) {
  if (K_range.first < 1 || M_range.first < 1 || K_range.second < K_range.first || M_range.second < M_range.first)
    throw Error("grid ranges must be non-empty and start at 1 or more");
  std::vector<ModelSpec> specs;
  for (int K = K_range.first; K <= K_range.second; ++K)
    for (int M = M_range.first; M <= M_range.second; ++M) specs.push_back({ModelFamily::LSA, K, M});
  std::vector<ElpdReport> reports = run_specs(data, specs, cv, progress);
  GridResult out;
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < specs.size(); ++j) {
    const auto key = std::make_pair(specs[j].K, specs[j].M);
    if (reports[j].elpd_estimate > best) {
      best = reports[j].elpd_estimate;
      out.best = key;
    }
    out.entries.emplace(key, std::move(reports[j]));
  }
  return out;
}

std::vector<ElpdReport> compare_families(const ObservationSet& data, int K, int M, const CvSettings& cv,
                                         const ProgressFn& progress) {
  const std::vector<ModelSpec> specs{{ModelFamily::MVN, 1, 1},
                                     {ModelFamily::FiniteMixture, 1, M},
                                     {ModelFamily::MixedMembership, 1, M},
                                     {ModelFamily::LSA, K, M}};
  return run_specs(data, specs, cv, progress);
}

// ---------------------------------------------------------------------------

int psis_tail_length(int S) {
  const int a = static_cast<int>(std::ceil(0.2 * S));
  const int b = static_cast<int>(std::ceil(3.0 * std::sqrt(static_cast<double>(S))));
  return std::min(a, b);
}

namespace {

// Profile log-likelihood of the GPD in theta = -k / sigma.
double gpd_profile(const Eigen::VectorXd& x, double theta, double* k_out) {
  const double n = static_cast<double>(x.size());
  if (std::abs(theta) < 1e-300) {
    if (k_out) *k_out = 0.0;
    return n * (-std::log(x.mean()) - 1.0);
  }
  const double k = (-theta * x.array()).log1p().mean();
  if (k_out) *k_out = k;
  const double ratio = -theta / k;
  if (!(ratio > 0.0) || !std::isfinite(k)) return -std::numeric_limits<double>::infinity();
  return n * (std::log(ratio) - k - 1.0);
}

}  // namespace

std::pair<double, double> gpd_fit(const Eigen::VectorXd& exceedances) {
  Eigen::VectorXd x = exceedances;
  std::sort(x.begin(), x.end());
  const auto n = x.size();
  if (n < 1 || !(x(n - 1) > 0.0)) throw Error("GPD fit needs positive exceedances");
  const int m = 30 + static_cast<int>(std::floor(std::sqrt(static_cast<double>(n))));
  const Eigen::Index q = std::max<Eigen::Index>(0, static_cast<Eigen::Index>(std::floor(n / 4.0 + 0.5)) - 1);
  const double xq = x(q) > 0.0 ? x(q) : x(n - 1);
  std::vector<double> grid(static_cast<std::size_t>(m));
  for (int j = 1; j <= m; ++j) grid[j - 1] = 1.0 / x(n - 1) + (1.0 - std::sqrt(m / (j - 0.5))) / (3.0 * xq);

  int best = 0;
  double best_val = -std::numeric_limits<double>::infinity();
  for (int j = 0; j < m; ++j) {
    const double v = gpd_profile(x, grid[j], nullptr);
    if (v > best_val) {
      best_val = v;
      best = j;
    }
  }
  double a = grid[std::max(0, best - 1)];
  double b = grid[std::min(m - 1, best + 1)];
  const double tol = 1e-8 / x(n - 1);
  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = b - phi * (b - a);
  double d = a + phi * (b - a);
  double fc = gpd_profile(x, c, nullptr);
  double fd = gpd_profile(x, d, nullptr);
  while (b - a > tol) {
    if (fc >= fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - phi * (b - a);
      fc = gpd_profile(x, c, nullptr);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + phi * (b - a);
      fd = gpd_profile(x, d, nullptr);
    }
  }
  double theta = 0.5 * (a + b);
  if (gpd_profile(x, theta, nullptr) < best_val) theta = grid[best];
  double k = 0.0;
  gpd_profile(x, theta, &k);
  const double sigma = std::abs(theta) < 1e-300 ? x.mean() : -k / theta;
  return {k, sigma};
}

PsisResult psis_smooth(const Eigen::VectorXd& log_weights) {
  const auto S = log_weights.size();
  if (S < 5) throw Error("Pareto smoothing needs at least 5 weights");
  PsisResult out{log_weights, 0.0};
  const double max_lw = log_weights.maxCoeff();
  if (log_weights.minCoeff() == max_lw) {
    out.pareto_k = -std::numeric_limits<double>::infinity();
    return out;
  }
  const int L = psis_tail_length(static_cast<int>(S));
  std::vector<Eigen::Index> order(static_cast<std::size_t>(S));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index i, Eigen::Index j) { return log_weights(i) < log_weights(j); });
  const double cutoff = log_weights(order[static_cast<std::size_t>(S - L - 1)]);
  Eigen::VectorXd x(L);
  for (int j = 0; j < L; ++j)
    x(j) = std::exp(log_weights(order[static_cast<std::size_t>(S - L + j)]) - max_lw) - std::exp(cutoff - max_lw);
  if (!(x.maxCoeff() > 0.0)) return out;  // tail tied with the cutoff; nothing to smooth
  const auto [k, sigma] = gpd_fit(x);
  out.pareto_k = k;
  const double base = std::exp(cutoff - max_lw);
  for (int j = 0; j < L; ++j) {
    const double p = (j + 0.5) / L;
    const double qv = std::abs(k) < 1e-12 ? -sigma * std::log1p(-p) : sigma / k * (std::pow(1.0 - p, -k) - 1.0);
    const double lw = std::log(base + qv) + max_lw;
    out.log_weights(order[static_cast<std::size_t>(S - L + j)]) = std::min(lw, max_lw);
  }
  return out;
}

PsisLooResult psis_loo(const Eigen::MatrixXd& log_lik, std::string label) {
  const auto N = log_lik.cols();
  PsisLooResult out;
  out.pareto_k.resize(N);
  Eigen::VectorXd pw(N);
  for (Eigen::Index i = 0; i < N; ++i) {
    const PsisResult sm = psis_smooth(-log_lik.col(i));
    out.pareto_k(i) = sm.pareto_k;
    pw(i) = log_sum_exp((sm.log_weights + log_lik.col(i)).eval()) - log_sum_exp(sm.log_weights);
  }
  out.report = ElpdReport::from_pointwise(std::move(label), std::move(pw), ElpdMethod::PsisAtMode);
  return out;
}

}  // namespace lsa
