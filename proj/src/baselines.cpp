#include "lsa/baselines.hpp"

#include <cmath>
#include <string>

#include "em_driver.hpp"
#include "lsa/numerics.hpp"

namespace lsa {

std::string_view to_string(BaselineFamily f) {
  switch (f) {
    case BaselineFamily::MVN: return "mvn";
    case BaselineFamily::FiniteMixture: return "finite_mixture";
    case BaselineFamily::MixedMembership: return "mixed_membership";
  }
  return "unknown";
}

void BaselineKind::validate() const {
  if (tag != BaselineFamily::MVN && M < 1) throw Error("mixture baselines need M >= 1");
}

Eigen::RowVectorXd BaselineParams::weights_for(int receiver) const {
  if (kind.tag == BaselineFamily::MixedMembership) return weights.row(receiver);
  return weights.row(0);
}

void BaselineParams::validate() const {
  kind.validate();
  GaussianLayer::validate();
  if (n_patterns() != kind.components()) throw DimensionMismatch("component count differs from the baseline kind");
  const Eigen::Index rows = kind.tag == BaselineFamily::MixedMembership ? n_receivers() : 1;
  if (weights.rows() != rows || weights.cols() != n_patterns()) throw DimensionMismatch("weight matrix has the wrong shape");
  StyleSimplex{weights}.validate();
}

namespace {

void weighted_terms(const BaselineParams& params, const ReturnObservation& obs, Eigen::VectorXd& terms) {
  pattern_log_densities(params, obs, terms);
  if (params.kind.tag == BaselineFamily::MVN) return;
  const Eigen::Index row = params.kind.tag == BaselineFamily::MixedMembership ? obs.receiver_id : 0;
  terms.array() += params.weights.row(row).transpose().array().log();
}

}  // namespace

double baseline_loglik_point(const BaselineParams& params, const ReturnObservation& obs) {
  Eigen::VectorXd terms(params.n_patterns());
  weighted_terms(params, obs, terms);
  return log_sum_exp(terms);
}

double baseline_loglik(const BaselineParams& params, std::span<const ReturnObservation> data) {
  params.validate();
  if (data.empty()) throw EmptyData("no observations");
  double total = 0.0;
  for (const auto& o : data) total += baseline_loglik_point(params, o);
  return total;
}

double baseline_log_prior(const BaselineParams& params) {
  double lp = gaussian_layer_log_prior(params);
  if (params.kind.tag != BaselineFamily::MVN)
    for (Eigen::Index i = 0; i < params.weights.rows(); ++i)
      lp += dirichlet_log_density(params.weights.row(i), params.priors.alpha0);
  return lp;
}

double baseline_log_posterior_unnorm(const BaselineParams& params, std::span<const ReturnObservation> data) {
  return baseline_loglik(params, data) + baseline_log_prior(params);
}

EStepResult baseline_e_step(const BaselineParams& params, std::span<const ReturnObservation> data) {
  const int M = params.n_patterns();
  EStepResult out;
  out.resp.K = 1;
  out.resp.M = M;
  out.resp.r.resize(static_cast<Eigen::Index>(data.size()), M);
  out.loglik.resize(static_cast<Eigen::Index>(data.size()));
  Eigen::VectorXd terms(M);
  for (std::size_t n = 0; n < data.size(); ++n) {
    weighted_terms(params, data[n], terms);
    const double lse = log_sum_exp(terms);
    if (!std::isfinite(lse)) throw NumericalError("observation " + std::to_string(n) + " has zero likelihood");
    const auto row = static_cast<Eigen::Index>(n);
    out.loglik(row) = lse;
    out.resp.r.row(row) = (terms.array() - lse).exp().transpose();
  }
  return out;
}

namespace {

Eigen::RowVectorXd dirichlet_map(const Eigen::RowVectorXd& counts, double alpha0) {
  Eigen::RowVectorXd row = (counts.array() + (alpha0 - 1.0)).max(0.0);
  if (!(row.sum() > 0.0)) row = counts;
  return row / row.sum();
}

struct BaselineModel {
  using Params = BaselineParams;
  const ObservationSet& data;
  BaselineKind kind;
  const FitConfig& cfg;
  const std::optional<BaselineParams>& initial;

  Params init(Rng& rng, int /*restart*/) const {
    const int M = kind.components();
    const int R = data.n_receivers;
    Params p;
    p.kind = kind;
    if (cfg.init_scheme == InitScheme::UserSupplied) {
      if (!initial) throw Error("user-supplied initialisation without initial parameters");
      p = *initial;
      p.priors = cfg.priors;
      p.validate();
      if (p.kind.tag != kind.tag || p.n_patterns() != M || p.n_receivers() != R ||
          p.n_servers() != data.n_servers || p.n_covariates() != data.n_covariates)
        throw DimensionMismatch("initial parameters do not match the data");
      return p;
    }
    if (cfg.init_scheme == InitScheme::PriorDraw) {
      static_cast<GaussianLayer&>(p) = prior_draw_layer(M, R, data.n_servers, data.n_covariates, cfg.priors, rng);
    } else {
      // K*M centres in the LSA initialiser; here one spare centre per component.
      const std::vector<int> labels = kmeans_then_merge(data.obs, 2 * M, M, rng);
      static_cast<GaussianLayer&>(p) =
          layer_from_labels(data.obs, labels, M, R, data.n_servers, data.n_covariates, cfg.priors);
    }
    p.weights = Eigen::MatrixXd::Constant(kind.tag == BaselineFamily::MixedMembership ? R : 1, M, 1.0 / M);
    return p;
  }

  EStepResult e_step(const Params& p) const { return baseline_e_step(p, data.obs); }

  double log_prior(const Params& p) const { return baseline_log_prior(p); }

  Params m_step(const Params& p, const EStepResult& es, bool& rescued) const {
    Params next = p;
    const Eigen::MatrixXd& W = es.resp.r;
    switch (kind.tag) {
      case BaselineFamily::MVN: break;
      case BaselineFamily::FiniteMixture:
        next.weights.row(0) = dirichlet_map(W.colwise().sum(), p.priors.alpha0);
        break;
      case BaselineFamily::MixedMembership: {
        Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(data.n_receivers, W.cols());
        std::vector<int> seen(static_cast<std::size_t>(data.n_receivers), 0);
        for (std::size_t n = 0; n < data.obs.size(); ++n) {
          const int i = data.obs[n].receiver_id;
          counts.row(i) += W.row(static_cast<Eigen::Index>(n));
          ++seen[static_cast<std::size_t>(i)];
        }
        for (int i = 0; i < data.n_receivers; ++i) {
          if (seen[static_cast<std::size_t>(i)] == 0)
            throw AllZeroRow("receiver " + std::to_string(i) + " has no observations");
          next.weights.row(i) = dirichlet_map(counts.row(i), p.priors.alpha0);
        }
        break;
      }
    }
    GaussianUpdate up = m_step_gaussians_weighted(W, data.obs, p, cfg.mean_sweeps);
    next.components = std::move(up.components);
    next.eta = std::move(up.eta);
    next.delta = std::move(up.delta);
    rescued = detail::rescue_empty_patterns(next, W.colwise().sum().transpose(), es.loglik, data.obs);
    return next;
  }
};

}  // namespace

BaselineFitReport baseline_fit(const ObservationSet& data, const BaselineKind& kind, const FitConfig& cfg,
                               const std::optional<BaselineParams>& initial) {
  cfg.validate_common();
  kind.validate();
  if (data.empty()) throw EmptyData("cannot fit an empty dataset");
  data.validate();
  BaselineModel model{data, kind, cfg, initial};
  return detail::fit_with_restarts(model, cfg);
}

}  // namespace lsa
