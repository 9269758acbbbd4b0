#include "lsa/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace lsa {

int SimConfig::points_for(int receiver) const {
  if (n_obs_per_receiver.size() == 1) return n_obs_per_receiver.front();
  return n_obs_per_receiver.at(static_cast<std::size_t>(receiver));
}

void SimConfig::validate() const {
  if (K < 1 || M < 1 || R < 1 || S < 1) throw Error("simulation counts must be at least 1");
  if (n_obs_per_receiver.empty() ||
      (n_obs_per_receiver.size() != 1 && n_obs_per_receiver.size() != static_cast<std::size_t>(R)))
    throw Error("n_obs_per_receiver must hold one entry or one per receiver");
  for (int n : n_obs_per_receiver)
    if (n < 1) throw Error("every receiver needs at least one observation");
  priors.validate();
  if (param_source == ParamSource::Explicit) {
    if (!explicit_params) throw Error("explicit parameter source without parameters");
    explicit_params->validate();
    if (explicit_params->K != K || explicit_params->M != M || explicit_params->n_receivers() != R ||
        explicit_params->n_servers() != S || explicit_params->n_covariates() != P())
      throw DimensionMismatch("explicit parameters disagree with the simulation config");
  }
}

namespace {

Eigen::MatrixXd normal_matrix(Rng& rng, int rows, int cols, double sd) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index j = 0; j < m.size(); ++j) m.data()[j] = sd * standard_normal(rng);
  return m;
}

LsaParams empty_params(int K, int M, int R, int S, const PriorSettings& priors) {
  LsaParams p;
  p.K = K;
  p.M = M;
  p.priors = priors;
  p.betas.beta.resize(K, M - 1);
  p.pi.pi.resize(R, K);
  p.components.resize(M);
  p.eta.resize(R);
  p.delta.resize(S);
  return p;
}

}  // namespace

LsaParams draw_params(const SimConfig& cfg, Rng& rng) {
  cfg.validate();
  const int P = cfg.P();
  const auto& pr = cfg.priors;
  LsaParams p = empty_params(cfg.K, cfg.M, cfg.R, cfg.S, pr);
  for (int m = 0; m + 1 < cfg.M; ++m) {
    Eigen::VectorXd col(cfg.K);
    bool strict = false;
    while (!strict) {
      for (int k = 0; k < cfg.K; ++k) col(k) = standard_normal(rng);
      std::sort(col.begin(), col.end());
      strict = std::adjacent_find(col.begin(), col.end()) == col.end();
    }
    p.betas.beta.col(m) = col;
  }
  for (int i = 0; i < cfg.R; ++i) p.pi.pi.row(i) = dirichlet_draw(rng, cfg.K, pr.alpha0);
  for (auto& c : p.components) {
    Eigen::MatrixXd alpha = normal_matrix(rng, kDims, P, pr.alpha_scale);
    const double corr = 2.0 * beta_draw(rng, pr.lkj_eta, pr.lkj_eta) - 1.0;
    Vec2 scales;
    for (int d = 0; d < kDims; ++d) {
      do {
        scales(d) = half_cauchy_draw(rng, pr.sigma_scale);
      } while (!(scales(d) > 0.0) || !std::isfinite(scales(d)));
    }
    c = GaussianComponent::from_scales(std::move(alpha), scales, std::clamp(corr, -0.999999, 0.999999));
  }
  for (auto& e : p.eta) e = normal_matrix(rng, kDims, P, pr.eta_scale);
  for (auto& d : p.delta) d = normal_matrix(rng, kDims, P, pr.delta_scale);
  p.validate();
  return p;
}

LsaParams structured_truth(const StructuredTruthOptions& opt, Rng& rng) {
  if (opt.K < 1 || opt.M < 1 || opt.R < 1 || opt.S < 1) throw Error("structured truth counts must be at least 1");
  const int K = opt.K, M = opt.M;
  const int P = io::covariate_count(opt.scheme);
  LsaParams p = empty_params(K, M, opt.R, opt.S, opt.priors);

  for (int m = 0; m < M; ++m) {
    Eigen::MatrixXd alpha = normal_matrix(rng, kDims, P, opt.covariate_effect_sd);
    alpha(0, 0) = M > 1 ? -4.5 + 9.0 * m / (M - 1) : 0.0;
    alpha(1, 0) = (m % 2 == 0) ? -0.5 : -2.5;
    Vec2 scales;
    for (int d = 0; d < kDims; ++d) scales(d) = opt.scale_low + (opt.scale_high - opt.scale_low) * uniform01(rng);
    const double corr = -0.3 + 0.6 * uniform01(rng);
    p.components[m] = GaussianComponent::from_scales(std::move(alpha), scales, corr);
  }

  // Style k leans on pattern d_k, with d_k non-increasing in k so that
  // every column of beta ascends.
  for (int k = 0; k < K; ++k) {
    if (K == 1) {
      for (int l = 0; l + 1 < M; ++l) p.betas.beta(0, l) = -std::log(static_cast<double>(M - 1 - l));
      break;
    }
    const int dk = static_cast<int>(std::lround(static_cast<double>(K - 1 - k) * (M - 1) / (K - 1)));
    for (int l = 0; l + 1 < M; ++l) {
      double b = dk > l ? -opt.pattern_logit : (dk == l ? opt.pattern_logit : opt.pattern_logit + 0.5);
      p.betas.beta(k, l) = b + 0.1 * k;
    }
  }

  for (int i = 0; i < opt.R; ++i) {
    const double rest = K > 1 ? (1.0 - opt.style_dominance) / (K - 1) : 0.0;
    p.pi.pi.row(i).setConstant(rest);
    p.pi.pi(i, i % K) = K > 1 ? opt.style_dominance : 1.0;
  }
  for (auto& e : p.eta) e = normal_matrix(rng, kDims, P, opt.offset_sd);
  for (auto& d : p.delta) d = normal_matrix(rng, kDims, P, opt.offset_sd);
  p.validate();
  return p;
}

SimulatedData sample_dataset(const LsaParams& params, const SimConfig& cfg, Rng& rng) {
  params.validate();
  if (params.n_receivers() != cfg.R || params.n_servers() != cfg.S || params.n_covariates() != cfg.P())
    throw DimensionMismatch("parameters disagree with the simulation config");
  const PatternSimplex theta = stick_break(params.betas);
  const std::uint64_t base = rng();

  SimulatedData out;
  out.data.n_receivers = cfg.R;
  out.data.n_servers = cfg.S;
  out.data.n_covariates = cfg.P();
  std::uniform_int_distribution<int> server_dist(0, cfg.S - 1);
  std::uniform_int_distribution<int> three(0, 2);
  std::uniform_int_distribution<int> two(0, 1);
  for (int i = 0; i < cfg.R; ++i) {
    Rng local = make_stream(base, "receiver", static_cast<std::uint64_t>(i));
    for (int j = 0; j < cfg.points_for(i); ++j) {
      const int k = categorical_draw(local, params.pi.pi.row(i));
      const int m = categorical_draw(local, theta.theta.row(k));
      ReturnObservation obs;
      obs.receiver_id = i;
      obs.server_id = server_dist(local);
      io::ServeContext ctx;
      ctx.side = two(local) == 0 ? io::CourtSide::Deuce : io::CourtSide::Ad;
      ctx.direction = static_cast<io::ServeDirection>(three(local));
      ctx.surface = static_cast<io::Surface>(three(local));
      obs.covariates = io::encode_context(ctx, cfg.covariate_scheme);
      const auto& comp = params.components[m];
      const Vec2 mu = component_mean(comp, params.eta[i], params.delta[obs.server_id], obs.covariates);
      const Vec2 z(standard_normal(local), standard_normal(local));
      obs.location = mu + comp.sigma_chol * z;
      out.data.obs.push_back(std::move(obs));
      out.latent.emplace_back(k, m);
      out.contexts.push_back(ctx);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

void GridSpec::validate() const {
  if (nx < 2 || ny < 2) throw DegenerateGrid("grid resolution must be at least 2 per axis");
  if (!(x_max > x_min) || !(y_max > y_min) || !std::isfinite(x_max - x_min) || !std::isfinite(y_max - y_min))
    throw DegenerateGrid("grid bounding box is empty or not finite");
}

namespace {

struct Offsets {
  Eigen::MatrixXd eta;
  Eigen::MatrixXd delta;
};

Offsets context_offsets(const GaussianLayer& layer, const PredictiveContext& ctx) {
  const Eigen::Index P = layer.n_covariates();
  if (ctx.covariates.size() != P) throw DimensionMismatch("covariate vector length differs from the model");
  Offsets o{Eigen::MatrixXd::Zero(kDims, P), Eigen::MatrixXd::Zero(kDims, P)};
  if (ctx.receiver) o.eta = layer.eta.at(static_cast<std::size_t>(*ctx.receiver));
  if (ctx.server) o.delta = layer.delta.at(static_cast<std::size_t>(*ctx.server));
  return o;
}

}  // namespace

Eigen::RowVectorXd pattern_weights(const LsaParams& params, const PredictiveContext& ctx) {
  const PatternSimplex theta = stick_break(params.betas);
  Eigen::RowVectorXd style;
  if (ctx.receiver) {
    style = params.pi.pi.row(*ctx.receiver);
  } else {
    style = params.pi.pi.colwise().mean();
  }
  return style * theta.theta;
}

std::vector<Eigen::MatrixXd> component_grids(const GaussianLayer& layer, const PredictiveContext& ctx,
                                             const GridSpec& grid) {
  grid.validate();
  const Offsets off = context_offsets(layer, ctx);
  std::vector<Eigen::MatrixXd> out;
  out.reserve(layer.components.size());
  for (const auto& comp : layer.components) {
    const Vec2 mu = component_mean(comp, off.eta, off.delta, ctx.covariates);
    Eigen::MatrixXd g(grid.ny, grid.nx);
    for (int j = 0; j < grid.ny; ++j)
      for (int i = 0; i < grid.nx; ++i)
        g(j, i) = std::exp(mvn_logpdf(Vec2(grid.x_center(i), grid.y_center(j)), mu, comp.sigma_chol));
    out.push_back(std::move(g));
  }
  return out;
}

Eigen::MatrixXd mixture_grid(const GaussianLayer& layer, const Eigen::RowVectorXd& weights,
                             const PredictiveContext& ctx, const GridSpec& grid) {
  if (weights.size() != layer.n_patterns()) throw DimensionMismatch("one weight per pattern is required");
  const auto parts = component_grids(layer, ctx, grid);
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(grid.ny, grid.nx);
  for (std::size_t m = 0; m < parts.size(); ++m) out += weights(static_cast<Eigen::Index>(m)) * parts[m];
  return out;
}

Eigen::MatrixXd posterior_predictive_grid(const LsaParams& params, const PredictiveContext& ctx,
                                          const GridSpec& grid) {
  params.validate();
  return mixture_grid(params, pattern_weights(params, ctx), ctx, grid);
}

GridSpec covering_grid(const GaussianLayer& layer, const Eigen::RowVectorXd& weights,
                       const PredictiveContext& ctx, int nx, int ny, double n_sd) {
  const Offsets off = context_offsets(layer, ctx);
  GridSpec g;
  g.nx = nx;
  g.ny = ny;
  g.x_min = g.y_min = std::numeric_limits<double>::infinity();
  g.x_max = g.y_max = -std::numeric_limits<double>::infinity();
  for (int m = 0; m < layer.n_patterns(); ++m) {
    if (!(weights(m) > 0.0)) continue;
    const auto& comp = layer.components[m];
    const Vec2 mu = component_mean(comp, off.eta, off.delta, ctx.covariates);
    const Mat2 cov = comp.covariance();
    const double sx = n_sd * std::sqrt(cov(0, 0));
    const double sy = n_sd * std::sqrt(cov(1, 1));
    g.x_min = std::min(g.x_min, mu(0) - sx);
    g.x_max = std::max(g.x_max, mu(0) + sx);
    g.y_min = std::min(g.y_min, mu(1) - sy);
    g.y_max = std::max(g.y_max, mu(1) + sy);
  }
  g.validate();
  return g;
}

}  // namespace lsa
