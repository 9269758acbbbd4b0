#pragma once

// Serve context categories and their encoding into covariate rows.
//
// Full scheme (P = 8):
//   0 intercept
//   1..5 court side x serve direction cells, reference deuce-wide:
//        deuce-body, deuce-t, ad-wide, ad-body, ad-t
//   6..7 surface, reference hard: clay, grass
// A record without a serve direction gets all direction columns at zero.

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

namespace lsa::io {

enum class CourtSide { Deuce, Ad };
enum class ServeDirection { Wide, Body, T };
enum class Surface { Clay, Grass, Hard };

enum class CovariateScheme {
  Intercept,  // P = 1
  Surface,    // P = 3: intercept, clay, grass
  Full,       // P = 8
};

struct ServeContext {
  CourtSide side = CourtSide::Deuce;
  std::optional<ServeDirection> direction = ServeDirection::Wide;
  Surface surface = Surface::Hard;
};

int covariate_count(CovariateScheme scheme);
std::vector<std::string> covariate_names(CovariateScheme scheme);
Eigen::VectorXd encode_context(const ServeContext& ctx, CovariateScheme scheme);

std::string_view to_string(CourtSide v);
std::string_view to_string(ServeDirection v);
std::string_view to_string(Surface v);
std::string_view to_string(CovariateScheme v);

std::optional<CourtSide> parse_court_side(std::string_view s);
std::optional<ServeDirection> parse_serve_direction(std::string_view s);
std::optional<Surface> parse_surface(std::string_view s);
std::optional<CovariateScheme> parse_scheme(std::string_view s);

}  // namespace lsa::io
