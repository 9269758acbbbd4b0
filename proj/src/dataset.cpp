#include "lsa/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "lsa/error.hpp"
#include "lsa/model_file.hpp"

namespace lsa::io {

namespace {

const std::vector<std::string> kColumns{"match_id", "receiver",  "server",  "serve_number", "court_side",
                                        "serve_direction", "surface", "lateral", "depth", "date"};

std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

// Splits one line, honouring double-quoted fields with "" escapes.
std::vector<std::string> split_line(const std::string& line, std::size_t row) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(field));
      field.clear();
    } else {
      field += c;
    }
  }
  if (quoted) throw ParseError(row, "", "unterminated quoted field");
  out.push_back(std::move(field));
  return out;
}

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

double parse_double(const std::string& s, std::size_t row, const std::string& column) {
  const std::string t = trim(s);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || ptr != t.data() + t.size())
    throw ParseError(row, column, "'" + s + "' is not a number");
  if (!std::isfinite(v)) throw ParseError(row, column, "value must be finite");
  return v;
}

bool valid_date(const std::string& s) {
  if (s.size() != 10 || s[4] != '-' || s[7] != '-') return false;
  for (std::size_t i : {0u, 1u, 2u, 3u, 5u, 6u, 8u, 9u})
    if (!std::isdigit(static_cast<unsigned char>(s[i]))) return false;
  const int month = std::stoi(s.substr(5, 2));
  const int day = std::stoi(s.substr(8, 2));
  return month >= 1 && month <= 12 && day >= 1 && day <= 31;
}

std::string quote_if_needed(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

}  // namespace

std::vector<RawReturnRecord> parse_csv(std::istream& in, int schema_version) {
  if (schema_version != kCsvSchemaVersion)
    throw VersionMismatch("unsupported CSV schema version " + std::to_string(schema_version));
  std::string line;
  std::size_t row = 0;
  bool have_header = false;
  while (!have_header && std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    if (line.rfind("#format_version=", 0) == 0) {
      const std::string v = trim(line.substr(16));
      if (v != std::to_string(schema_version)) throw VersionMismatch("CSV format version " + v + " is not supported");
      continue;
    }
    if (row == 1 && line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);  // BOM
    std::vector<std::string> cols = split_line(line, row);
    for (auto& c : cols) c = lower(trim(c));
    if (cols != kColumns) throw ParseError(row, "", "header does not match the expected columns");
    have_header = true;
  }
  if (!have_header) throw ParseError(0, "", "missing header");

  std::vector<RawReturnRecord> out;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    const std::vector<std::string> f = split_line(line, row);
    if (f.size() != kColumns.size())
      throw ParseError(row, "", "expected " + std::to_string(kColumns.size()) + " fields, found " +
                                    std::to_string(f.size()));
    RawReturnRecord r;
    r.match_id = trim(f[0]);
    r.receiver = trim(f[1]);
    r.server = trim(f[2]);
    if (r.match_id.empty()) throw ParseError(row, "match_id", "empty value");
    if (r.receiver.empty()) throw ParseError(row, "receiver", "empty value");
    if (r.server.empty()) throw ParseError(row, "server", "empty value");
    const std::string sn = trim(f[3]);
    if (sn == "1") r.serve_number = 1;
    else if (sn == "2") r.serve_number = 2;
    else throw UnknownEnumValue(row, "serve_number", sn);
    const auto side = parse_court_side(lower(trim(f[4])));
    if (!side) throw UnknownEnumValue(row, "court_side", f[4]);
    r.court_side = *side;
    const std::string dir = lower(trim(f[5]));
    if (!dir.empty()) {
      const auto d = parse_serve_direction(dir);
      if (!d) throw UnknownEnumValue(row, "serve_direction", f[5]);
      r.serve_direction = *d;
    }
    const auto surf = parse_surface(lower(trim(f[6])));
    if (!surf) throw UnknownEnumValue(row, "surface", f[6]);
    r.surface = *surf;
    r.lateral = parse_double(f[7], row, "lateral");
    r.depth = parse_double(f[8], row, "depth");
    r.date = trim(f[9]);
    if (!valid_date(r.date)) throw ParseError(row, "date", "'" + f[9] + "' is not a YYYY-MM-DD date");
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<RawReturnRecord> load_csv(const std::filesystem::path& path, int schema_version) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return parse_csv(in, schema_version);
}

void write_csv(std::ostream& out, const std::vector<RawReturnRecord>& records) {
  out << "#format_version=" << kCsvSchemaVersion << '\n';
  for (std::size_t j = 0; j < kColumns.size(); ++j) out << (j ? "," : "") << kColumns[j];
  out << '\n';
  for (const auto& r : records) {
    out << quote_if_needed(r.match_id) << ',' << quote_if_needed(r.receiver) << ',' << quote_if_needed(r.server)
        << ',' << r.serve_number << ',' << to_string(r.court_side) << ','
        << (r.serve_direction ? std::string(to_string(*r.serve_direction)) : std::string()) << ','
        << to_string(r.surface) << ',' << format_double(r.lateral) << ',' << format_double(r.depth) << ',' << r.date
        << '\n';
  }
}

void write_csv(const std::filesystem::path& path, const std::vector<RawReturnRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  write_csv(out, records);
  if (!out) throw IoError("write failed for " + path.string());
}

FilterResult apply_filters(const std::vector<RawReturnRecord>& records, const FilterSettings& settings) {
  FilterResult res;
  res.kept = records;
  for (;;) {
    ++res.report.passes;
    std::map<std::string, int> match_points;
    for (const auto& r : res.kept) ++match_points[r.match_id];
    std::set<std::string> short_matches;
    for (const auto& [id, n] : match_points)
      if (n < settings.min_match_points) short_matches.insert(id);
    const std::size_t before_match = res.kept.size();
    std::erase_if(res.kept, [&](const RawReturnRecord& r) { return short_matches.count(r.match_id) > 0; });
    res.report.matches_dropped += static_cast<int>(short_matches.size());
    res.report.records_dropped_by_match_rule += static_cast<int>(before_match - res.kept.size());

    std::map<std::string, std::set<std::string>> receiver_matches;
    for (const auto& r : res.kept) receiver_matches[r.receiver].insert(r.match_id);
    std::set<std::string> thin;
    for (const auto& [name, ms] : receiver_matches)
      if (static_cast<int>(ms.size()) < settings.min_receiver_matches) thin.insert(name);
    const std::size_t before_recv = res.kept.size();
    std::erase_if(res.kept, [&](const RawReturnRecord& r) { return thin.count(r.receiver) > 0; });
    res.report.receivers_dropped += static_cast<int>(thin.size());
    res.report.records_dropped_by_receiver_rule += static_cast<int>(before_recv - res.kept.size());

    if (short_matches.empty() && thin.empty()) break;
  }
  return res;
}

Dataset encode_covariates(const std::vector<RawReturnRecord>& records, CovariateScheme scheme, int serve_number) {
  if (serve_number != 1 && serve_number != 2) throw Error("serve number must be 1 or 2");
  Dataset ds;
  ds.scheme = scheme;
  ds.serve_number = serve_number;
  ds.covariate_names = covariate_names(scheme);
  std::set<std::string> receivers, servers;
  for (const auto& r : records)
    if (r.serve_number == serve_number) {
      receivers.insert(r.receiver);
      servers.insert(r.server);
    }
  ds.receiver_roster.assign(receivers.begin(), receivers.end());
  ds.server_roster.assign(servers.begin(), servers.end());
  const auto index_of = [](const std::vector<std::string>& roster, const std::string& name) {
    return static_cast<int>(std::lower_bound(roster.begin(), roster.end(), name) - roster.begin());
  };
  ds.data.n_receivers = static_cast<int>(ds.receiver_roster.size());
  ds.data.n_servers = static_cast<int>(ds.server_roster.size());
  ds.data.n_covariates = covariate_count(scheme);
  for (const auto& r : records) {
    if (r.serve_number != serve_number) continue;
    ServeContext ctx{r.court_side, r.serve_direction, r.surface};
    if (!r.serve_direction) ++ds.missing_direction;
    ReturnObservation o;
    o.receiver_id = index_of(ds.receiver_roster, r.receiver);
    o.server_id = index_of(ds.server_roster, r.server);
    o.location = Vec2(r.lateral, r.depth);
    o.covariates = encode_context(ctx, scheme);
    ds.data.obs.push_back(std::move(o));
    ds.contexts.push_back(ctx);
  }
  return ds;
}

}  // namespace lsa::io
