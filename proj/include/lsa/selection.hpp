#pragma once

// Held-out predictive comparison of fitted models: stratified k-fold ELPD,
// (K, M) grid search, family comparison, and Pareto smoothing of importance
// weights.

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "lsa/baselines.hpp"
#include "lsa/core_model.hpp"
#include "lsa/inference.hpp"

namespace lsa {

enum class ModelFamily { MVN, FiniteMixture, MixedMembership, LSA };

std::string_view to_string(ModelFamily f);

struct ModelSpec {
  ModelFamily family = ModelFamily::LSA;
  int K = 1;  // LSA only
  int M = 1;  // ignored for MVN

  std::string label() const;
  void validate() const;
};

enum class ElpdMethod { KFold, PsisAtMode };

struct ElpdReport {
  std::string model_label;
  double elpd_estimate = 0.0;
  double se = 0.0;
  Eigen::VectorXd pointwise;
  ElpdMethod method = ElpdMethod::KFold;
  std::vector<int> fold_assignments;

  /// Sum and sqrt(N) * sample sd of the pointwise values.
  static ElpdReport from_pointwise(std::string label, Eigen::VectorXd pointwise, ElpdMethod method,
                                   std::vector<int> folds = {});
};

/// Fold label per observation. Each receiver's observations are shuffled with
/// the seed and dealt round-robin, starting at a receiver-specific offset, so
/// every receiver appears in every training set. Throws
/// InsufficientDataPerFold if some receiver has fewer than `folds` points.
std::vector<int> assign_folds(const ObservationSet& data, int folds, std::uint64_t seed);

struct CvSettings {
  int folds = 5;
  FitConfig fit;  // fit.seed also drives the fold assignment
  int threads = 1;  // concurrent fold fits; fits themselves run single-threaded
};

/// Fit each training split and score the held-out points by their marginal
/// log predictive density at the training MAP.
ElpdReport kfold_elpd(const ObservationSet& data, const ModelSpec& spec, const CvSettings& cv);

/// Oracle mode: score every point under fixed parameters, split into the same
/// folds as kfold_elpd but without fitting.
ElpdReport fixed_params_elpd(const ObservationSet& data, const LsaParams& params, int folds, std::uint64_t seed);

struct GridResult {
  std::map<std::pair<int, int>, ElpdReport> entries;  // (K, M) -> report
  std::pair<int, int> best{0, 0};
};

using ProgressFn = std::function<void(const std::string&)>;

/// kfold_elpd for every (K, M) in the inclusive ranges. All (cell, fold) fits
/// are scheduled together across cv.threads workers. Ties in ELPD go to the
/// smaller (K, M).
GridResult grid_search(const ObservationSet& data, std::pair<int, int> K_range, std::pair<int, int> M_range,
                       const CvSettings& cv, const ProgressFn& progress = {});

/// MVN, FiniteMixture(M), MixedMembership(M) and LSA(K, M), in that order.
std::vector<ElpdReport> compare_families(const ObservationSet& data, int K, int M, const CvSettings& cv,
                                         const ProgressFn& progress = {});

// ---------------------------------------------------------------------------
// Pareto smoothed importance sampling

struct PsisResult {
  Eigen::VectorXd log_weights;
  double pareto_k = 0.0;  // -infinity when every weight is equal
};

/// Number of tail weights smoothed: min(ceil(0.2 S), ceil(3 sqrt(S))).
int psis_tail_length(int S);

/// Generalised Pareto fit to exceedances by profile likelihood over the shape
/// grid, refined by golden-section search. Returns (k, sigma).
std::pair<double, double> gpd_fit(const Eigen::VectorXd& exceedances);

/// Replaces the largest weights with GPD quantiles at (j - 0.5) / L, capped at
/// the largest raw weight. Requires at least 5 weights. Equal weights are
/// returned unchanged with pareto_k = -infinity.
PsisResult psis_smooth(const Eigen::VectorXd& log_weights);

struct PsisLooResult {
  ElpdReport report;
  Eigen::VectorXd pareto_k;  // one per observation
};

/// PSIS-LOO from an S x N matrix of pointwise log-likelihoods over S draws.
PsisLooResult psis_loo(const Eigen::MatrixXd& log_lik, std::string label = "psis");

}  // namespace lsa
