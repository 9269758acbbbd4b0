#include "lsa/covariates.hpp"

namespace lsa::io {

int covariate_count(CovariateScheme scheme) {
  switch (scheme) {
    case CovariateScheme::Intercept: return 1;
    case CovariateScheme::Surface: return 3;
    case CovariateScheme::Full: return 8;
  }
  return 0;
}

std::vector<std::string> covariate_names(CovariateScheme scheme) {
  switch (scheme) {
    case CovariateScheme::Intercept: return {"intercept"};
    case CovariateScheme::Surface: return {"intercept", "clay", "grass"};
    case CovariateScheme::Full:
      return {"intercept", "deuce_body", "deuce_t", "ad_wide", "ad_body", "ad_t", "clay", "grass"};
  }
  return {};
}

Eigen::VectorXd encode_context(const ServeContext& ctx, CovariateScheme scheme) {
  Eigen::VectorXd x = Eigen::VectorXd::Zero(covariate_count(scheme));
  x(0) = 1.0;
  if (scheme == CovariateScheme::Intercept) return x;
  const int surface_col = scheme == CovariateScheme::Full ? 6 : 1;
  if (ctx.surface == Surface::Clay) x(surface_col) = 1.0;
  if (ctx.surface == Surface::Grass) x(surface_col + 1) = 1.0;
  if (scheme == CovariateScheme::Full && ctx.direction) {
    // cell index 0 is the deuce-wide reference
    const int cell = (ctx.side == CourtSide::Ad ? 3 : 0) + static_cast<int>(*ctx.direction);
    if (cell > 0) x(cell) = 1.0;
  }
  return x;
}

std::string_view to_string(CourtSide v) { return v == CourtSide::Deuce ? "deuce" : "ad"; }

std::string_view to_string(ServeDirection v) {
  switch (v) {
    case ServeDirection::Wide: return "wide";
    case ServeDirection::Body: return "body";
    case ServeDirection::T: return "t";
  }
  return "";
}

std::string_view to_string(Surface v) {
  switch (v) {
    case Surface::Clay: return "clay";
    case Surface::Grass: return "grass";
    case Surface::Hard: return "hard";
  }
  return "";
}

std::string_view to_string(CovariateScheme v) {
  switch (v) {
    case CovariateScheme::Intercept: return "intercept";
    case CovariateScheme::Surface: return "surface";
    case CovariateScheme::Full: return "full";
  }
  return "";
}

std::optional<CourtSide> parse_court_side(std::string_view s) {
  if (s == "deuce") return CourtSide::Deuce;
  if (s == "ad") return CourtSide::Ad;
  return std::nullopt;
}

std::optional<ServeDirection> parse_serve_direction(std::string_view s) {
  if (s == "wide") return ServeDirection::Wide;
  if (s == "body") return ServeDirection::Body;
  if (s == "t") return ServeDirection::T;
  return std::nullopt;
}

std::optional<Surface> parse_surface(std::string_view s) {
  if (s == "clay") return Surface::Clay;
  if (s == "grass") return Surface::Grass;
  if (s == "hard") return Surface::Hard;
  return std::nullopt;
}

std::optional<CovariateScheme> parse_scheme(std::string_view s) {
  if (s == "intercept") return CovariateScheme::Intercept;
  if (s == "surface") return CovariateScheme::Surface;
  if (s == "full") return CovariateScheme::Full;
  return std::nullopt;
}

}  // namespace lsa::io
