#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "lsa/core_model.hpp"
#include "lsa/covariates.hpp"
#include "lsa/random.hpp"

namespace lsa {

enum class ParamSource { DrawFromPriors, Explicit };

struct SimConfig {
  int K = 3;
  int M = 3;
  int R = 40;
  int S = 40;
  std::vector<int> n_obs_per_receiver{500};  // one entry broadcasts to all receivers
  std::uint64_t rng_seed = 1;
  io::CovariateScheme covariate_scheme = io::CovariateScheme::Full;
  ParamSource param_source = ParamSource::DrawFromPriors;
  std::optional<LsaParams> explicit_params;
  PriorSettings priors;

  int P() const { return io::covariate_count(covariate_scheme); }
  int points_for(int receiver) const;
  void validate() const;
};

/// A full parameter draw from the prior. Ordered columns come from sorting K
/// independent standard normals.
LsaParams draw_params(const SimConfig& cfg, Rng& rng);

/// Knobs for a hand-built, well-separated ground truth.
struct StructuredTruthOptions {
  int K = 3;
  int M = 3;
  int R = 40;
  int S = 40;
  io::CovariateScheme scheme = io::CovariateScheme::Full;
  double style_dominance = 0.9;  // pi weight on each receiver's own style
  double pattern_logit = 2.5;    // |beta| driving each style toward its own pattern
  double covariate_effect_sd = 0.25;
  double offset_sd = 0.15;
  double scale_low = 0.4;
  double scale_high = 0.6;
  PriorSettings priors;
};

/// Ground truth with pattern means laid out across the court behind the
/// baseline, style k concentrating on its own pattern, and receiver i
/// concentrating on style i mod K.
LsaParams structured_truth(const StructuredTruthOptions& opt, Rng& rng);

struct SimulatedData {
  ObservationSet data;
  std::vector<std::pair<int, int>> latent;  // (style, pattern) per observation
  std::vector<io::ServeContext> contexts;
};

/// Ancestral sampling, receiver by receiver. Receiver i uses its own stream
/// derived from one draw of `rng`, so output does not depend on scheduling.
SimulatedData sample_dataset(const LsaParams& params, const SimConfig& cfg, Rng& rng);

// ---------------------------------------------------------------------------
// Posterior predictive densities on a grid.

struct GridSpec {
  double x_min = -8.0;  // lateral
  double x_max = 8.0;
  int nx = 200;
  double y_min = -8.0;  // depth
  double y_max = 4.0;
  int ny = 200;

  void validate() const;
  double dx() const { return (x_max - x_min) / nx; }
  double dy() const { return (y_max - y_min) / ny; }
  double cell_area() const { return dx() * dy(); }
  double x_center(int i) const { return x_min + (i + 0.5) * dx(); }
  double y_center(int j) const { return y_min + (j + 0.5) * dy(); }
};

/// Which player offsets to apply. A missing receiver means zero receiver
/// offset with style weights averaged over receivers; a missing server means
/// zero server offset.
struct PredictiveContext {
  std::optional<int> receiver;
  std::optional<int> server;
  Eigen::VectorXd covariates;
};

/// sum_k pi_k theta_km for the context's receiver (or the receiver average).
Eigen::RowVectorXd pattern_weights(const LsaParams& params, const PredictiveContext& ctx);

/// Density of each pattern on the grid (ny x nx, row j is depth y_j).
std::vector<Eigen::MatrixXd> component_grids(const GaussianLayer& layer, const PredictiveContext& ctx,
                                             const GridSpec& grid);

/// Weighted mixture of pattern densities on the grid.
Eigen::MatrixXd mixture_grid(const GaussianLayer& layer, const Eigen::RowVectorXd& weights,
                             const PredictiveContext& ctx, const GridSpec& grid);

Eigen::MatrixXd posterior_predictive_grid(const LsaParams& params, const PredictiveContext& ctx,
                                          const GridSpec& grid);

/// Box covering every pattern with positive weight out to n_sd marginal
/// standard deviations.
GridSpec covering_grid(const GaussianLayer& layer, const Eigen::RowVectorXd& weights,
                       const PredictiveContext& ctx, int nx, int ny, double n_sd = 8.0);

}  // namespace lsa
