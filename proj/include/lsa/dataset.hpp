#pragma once

// Return-impact CSV ingestion, inclusion filters and covariate encoding.
//
// CSV schema, version 1 (UTF-8, comma separated, header required):
//   match_id,receiver,server,serve_number,court_side,serve_direction,surface,lateral,depth,date
// serve_number is 1 or 2; court_side deuce|ad; serve_direction wide|body|t or
// empty; surface clay|grass|hard; lateral/depth in metres; date YYYY-MM-DD.
// An optional first line "#format_version=1" may precede the header.

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "lsa/core_model.hpp"
#include "lsa/covariates.hpp"

namespace lsa::io {

inline constexpr int kCsvSchemaVersion = 1;

struct RawReturnRecord {
  std::string match_id;
  std::string receiver;
  std::string server;
  int serve_number = 1;
  CourtSide court_side = CourtSide::Deuce;
  std::optional<ServeDirection> serve_direction;
  Surface surface = Surface::Hard;
  double lateral = 0.0;
  double depth = 0.0;
  std::string date;
};

/// Throws ParseError (row 0 for a missing header), UnknownEnumValue or
/// VersionMismatch. Rows are numbered by file line, starting at 1.
std::vector<RawReturnRecord> parse_csv(std::istream& in, int schema_version = kCsvSchemaVersion);
std::vector<RawReturnRecord> load_csv(const std::filesystem::path& path, int schema_version = kCsvSchemaVersion);

/// Writes the header and one line per record. Doubles use the shortest
/// representation that reads back exactly.
void write_csv(std::ostream& out, const std::vector<RawReturnRecord>& records);
void write_csv(const std::filesystem::path& path, const std::vector<RawReturnRecord>& records);

struct FilterSettings {
  int min_match_points = 30;
  int min_receiver_matches = 3;
};

struct FilterReport {
  int matches_dropped = 0;
  int records_dropped_by_match_rule = 0;
  int receivers_dropped = 0;
  int records_dropped_by_receiver_rule = 0;
  int passes = 0;  // rounds of (match rule, receiver rule) until nothing changed
};

struct FilterResult {
  std::vector<RawReturnRecord> kept;
  FilterReport report;
};

/// Drops matches with fewer than min_match_points records, then receivers
/// left with fewer than min_receiver_matches matches, repeating both rules
/// until neither removes anything. Record order is preserved.
FilterResult apply_filters(const std::vector<RawReturnRecord>& records, const FilterSettings& settings = {});

struct Dataset {
  ObservationSet data;
  std::vector<std::string> receiver_roster;  // sorted names; index = receiver_id
  std::vector<std::string> server_roster;
  CovariateScheme scheme = CovariateScheme::Full;
  std::vector<std::string> covariate_names;
  int serve_number = 1;
  int missing_direction = 0;  // records encoded with no direction indicator
  std::vector<ServeContext> contexts;
};

/// Keeps records with the given serve number and encodes them. Rosters are
/// built from the kept records only.
Dataset encode_covariates(const std::vector<RawReturnRecord>& records, CovariateScheme scheme, int serve_number = 1);

}  // namespace lsa::io
