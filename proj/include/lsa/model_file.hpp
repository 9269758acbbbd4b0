#pragma once

// Versioned file formats: model file (JSON), fit report (JSON) and density
// grid (plain text). Every writer is deterministic; files are replaced
// atomically.

#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Core>

#include "lsa/baselines.hpp"
#include "lsa/core_model.hpp"
#include "lsa/covariates.hpp"
#include "lsa/inference.hpp"
#include "lsa/sampler.hpp"

namespace lsa::io {

inline constexpr int kModelFormatVersion = 1;
inline constexpr int kGridFormatVersion = 1;

/// Writes `contents` to a temporary sibling and renames it over `path`.
void atomic_write(const std::filesystem::path& path, const std::string& contents);
std::string read_file(const std::filesystem::path& path);

struct ModelMetadata {
  std::vector<std::string> receivers;
  std::vector<std::string> servers;
  std::vector<std::string> covariate_names;
  std::optional<CovariateScheme> scheme;
  int serve_number = 1;
};

struct ModelDocument {
  std::variant<LsaParams, BaselineParams> params;
  ModelMetadata meta;

  bool is_lsa() const { return std::holds_alternative<LsaParams>(params); }
  const GaussianLayer& layer() const;
};

/// Doubles are written in shortest round-trip form, so reading back gives
/// bit-identical parameters. Throws VersionMismatch or DataError on bad input.
std::string model_to_string(const ModelDocument& doc);
ModelDocument model_from_string(const std::string& text);
void write_model_file(const std::filesystem::path& path, const ModelDocument& doc);
ModelDocument read_model_file(const std::filesystem::path& path);

std::string fit_report_to_string(const FitReport& report, const std::string& label);
std::string fit_report_to_string(const BaselineFitReport& report, const std::string& label);

struct GridDocument {
  GridSpec spec;
  std::string kind;  // "predictive", "component", ...
  std::string receiver = "none";
  std::string server = "none";
  Eigen::VectorXd covariates;
  Eigen::MatrixXd values;  // ny x nx, row j is depth y_j
};

/// Header lines "key=value" after "#format_version=1", a "values" line, then
/// ny rows of nx values.
std::string grid_to_string(const GridDocument& grid);
GridDocument grid_from_string(const std::string& text);

/// Shortest round-trip decimal form.
std::string format_double(double v);

}  // namespace lsa::io
