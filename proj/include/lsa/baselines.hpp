#pragma once

// Comparison families sharing the LSA Gaussian layer (pattern effects,
// receiver/server offsets, covariances and priors):
//   MVN             one component
//   FiniteMixture   one weight simplex shared by every receiver
//   MixedMembership one weight simplex per receiver, no pooling

#include <optional>
#include <span>
#include <string_view>

#include <Eigen/Core>

#include "lsa/core_model.hpp"
#include "lsa/inference.hpp"

namespace lsa {

enum class BaselineFamily { MVN, FiniteMixture, MixedMembership };

std::string_view to_string(BaselineFamily f);

struct BaselineKind {
  BaselineFamily tag = BaselineFamily::MVN;
  int M = 1;  // ignored for MVN

  int components() const noexcept { return tag == BaselineFamily::MVN ? 1 : M; }
  void validate() const;
};

struct BaselineParams : GaussianLayer {
  BaselineKind kind;
  Eigen::MatrixXd weights;  // 1 x M, or R x M for MixedMembership

  /// Weight simplex used for receiver i.
  Eigen::RowVectorXd weights_for(int receiver) const;
  void validate() const;
};

double baseline_loglik_point(const BaselineParams& params, const ReturnObservation& obs);
double baseline_loglik(const BaselineParams& params, std::span<const ReturnObservation> data);
/// Gaussian-layer prior plus a Dirichlet(alpha0) term per weight simplex.
double baseline_log_prior(const BaselineParams& params);
double baseline_log_posterior_unnorm(const BaselineParams& params, std::span<const ReturnObservation> data);

/// Responsibilities have K = 1 and one column per component.
EStepResult baseline_e_step(const BaselineParams& params, std::span<const ReturnObservation> data);

using BaselineFitReport = BasicFitReport<BaselineParams>;

/// Penalised EM with the same Gaussian M-step as LSA. The weight M-step is
/// global for FiniteMixture and per receiver for MixedMembership. With
/// InitScheme::UserSupplied, `initial` must be given.
BaselineFitReport baseline_fit(const ObservationSet& data, const BaselineKind& kind, const FitConfig& cfg,
                               const std::optional<BaselineParams>& initial = std::nullopt);

}  // namespace lsa
