#include "lsa/model_file.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include <json.hpp>

#include "lsa/error.hpp"

namespace lsa::io {

using nlohmann::ordered_json;

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

void atomic_write(const std::filesystem::path& path, const std::string& contents) {
  std::filesystem::path tmp = path;
  tmp += ".tmp" + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << contents;
    out.flush();
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot rename onto " + path.string());
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const GaussianLayer& ModelDocument::layer() const {
  if (is_lsa()) return std::get<LsaParams>(params);
  return std::get<BaselineParams>(params);
}

namespace {

ordered_json matrix_json(const Eigen::MatrixXd& m) {
  ordered_json rows = ordered_json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    ordered_json row = ordered_json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd json_matrix(const ordered_json& j, Eigen::Index rows, Eigen::Index cols, const std::string& what) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != rows)
    throw DataError("model file: '" + what + "' has the wrong number of rows");
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto& row = j[static_cast<std::size_t>(i)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
      throw DataError("model file: '" + what + "' has the wrong number of columns");
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

ordered_json layer_json(const GaussianLayer& layer) {
  ordered_json j;
  j["n_covariates"] = layer.n_covariates();
  j["n_receivers"] = layer.n_receivers();
  j["n_servers"] = layer.n_servers();
  const auto& p = layer.priors;
  j["priors"] = {{"alpha0", p.alpha0},         {"alpha_scale", p.alpha_scale}, {"eta_scale", p.eta_scale},
                 {"delta_scale", p.delta_scale}, {"lkj_eta", p.lkj_eta},       {"sigma_scale", p.sigma_scale}};
  ordered_json comps = ordered_json::array();
  for (const auto& c : layer.components) {
    ordered_json cj;
    cj["alpha"] = matrix_json(c.alpha);
    cj["scales"] = {c.scale_vec(0), c.scale_vec(1)};
    cj["correlation"] = c.correlation;
    comps.push_back(std::move(cj));
  }
  j["components"] = std::move(comps);
  ordered_json eta = ordered_json::array();
  for (const auto& e : layer.eta) eta.push_back(matrix_json(e));
  j["eta"] = std::move(eta);
  ordered_json delta = ordered_json::array();
  for (const auto& d : layer.delta) delta.push_back(matrix_json(d));
  j["delta"] = std::move(delta);
  return j;
}

GaussianLayer json_layer(const ordered_json& j, int n_components) {
  GaussianLayer layer;
  const int P = j.at("n_covariates").get<int>();
  const int R = j.at("n_receivers").get<int>();
  const int S = j.at("n_servers").get<int>();
  const auto& p = j.at("priors");
  layer.priors.alpha0 = p.at("alpha0").get<double>();
  layer.priors.alpha_scale = p.at("alpha_scale").get<double>();
  layer.priors.eta_scale = p.at("eta_scale").get<double>();
  layer.priors.delta_scale = p.at("delta_scale").get<double>();
  layer.priors.lkj_eta = p.at("lkj_eta").get<double>();
  layer.priors.sigma_scale = p.at("sigma_scale").get<double>();
  const auto& comps = j.at("components");
  if (!comps.is_array() || static_cast<int>(comps.size()) != n_components)
    throw DataError("model file: component count disagrees with the model shape");
  for (const auto& cj : comps) {
    const auto& sc = cj.at("scales");
    if (!sc.is_array() || sc.size() != 2) throw DataError("model file: scales must hold two values");
    layer.components.push_back(GaussianComponent::from_scales(json_matrix(cj.at("alpha"), kDims, P, "alpha"),
                                                              Vec2(sc[0].get<double>(), sc[1].get<double>()),
                                                              cj.at("correlation").get<double>()));
  }
  const auto& eta = j.at("eta");
  const auto& delta = j.at("delta");
  if (static_cast<int>(eta.size()) != R || static_cast<int>(delta.size()) != S)
    throw DataError("model file: offset counts disagree with the roster sizes");
  for (const auto& e : eta) layer.eta.push_back(json_matrix(e, kDims, P, "eta"));
  for (const auto& d : delta) layer.delta.push_back(json_matrix(d, kDims, P, "delta"));
  return layer;
}

std::string family_name(const ModelDocument& doc) {
  if (doc.is_lsa()) return "lsa";
  return std::string(to_string(std::get<BaselineParams>(doc.params).kind.tag));
}

}  // namespace

std::string model_to_string(const ModelDocument& doc) {
  ordered_json j;
  j["format_version"] = kModelFormatVersion;
  j["family"] = family_name(doc);
  if (doc.is_lsa()) {
    const auto& p = std::get<LsaParams>(doc.params);
    p.validate();
    j["K"] = p.K;
    j["M"] = p.M;
    j["betas"] = matrix_json(p.betas.beta);
    j["pi"] = matrix_json(p.pi.pi);
  } else {
    const auto& p = std::get<BaselineParams>(doc.params);
    p.validate();
    j["M"] = p.n_patterns();
    j["weights"] = matrix_json(p.weights);
  }
  j["layer"] = layer_json(doc.layer());
  ordered_json meta;
  meta["receivers"] = doc.meta.receivers;
  meta["servers"] = doc.meta.servers;
  meta["covariate_names"] = doc.meta.covariate_names;
  meta["scheme"] = doc.meta.scheme ? std::string(to_string(*doc.meta.scheme)) : std::string();
  meta["serve_number"] = doc.meta.serve_number;
  j["metadata"] = std::move(meta);
  return j.dump(2) + "\n";
}

ModelDocument model_from_string(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("model file is not valid JSON: ") + e.what());
  }
  try {
    if (!j.contains("format_version")) throw VersionMismatch("model file has no format_version");
    const int version = j.at("format_version").get<int>();
    if (version != kModelFormatVersion)
      throw VersionMismatch("model file version " + std::to_string(version) + " is not supported");
    const std::string family = j.at("family").get<std::string>();
    ModelDocument doc;
    const int M = j.at("M").get<int>();
    if (family == "lsa") {
      LsaParams p;
      p.K = j.at("K").get<int>();
      p.M = M;
      if (p.K < 1 || p.M < 1) throw DataError("model file: K and M must be positive");
      static_cast<GaussianLayer&>(p) = json_layer(j.at("layer"), M);
      p.betas.beta = json_matrix(j.at("betas"), p.K, M - 1, "betas");
      p.pi.pi = json_matrix(j.at("pi"), p.n_receivers(), p.K, "pi");
      p.validate();
      doc.params = std::move(p);
    } else {
      BaselineParams p;
      if (family == "mvn") p.kind.tag = BaselineFamily::MVN;
      else if (family == "finite_mixture") p.kind.tag = BaselineFamily::FiniteMixture;
      else if (family == "mixed_membership") p.kind.tag = BaselineFamily::MixedMembership;
      else throw DataError("model file: unknown family '" + family + "'");
      p.kind.M = M;
      static_cast<GaussianLayer&>(p) = json_layer(j.at("layer"), M);
      const Eigen::Index rows = p.kind.tag == BaselineFamily::MixedMembership ? p.n_receivers() : 1;
      p.weights = json_matrix(j.at("weights"), rows, M, "weights");
      p.validate();
      doc.params = std::move(p);
    }
    const auto& meta = j.at("metadata");
    doc.meta.receivers = meta.at("receivers").get<std::vector<std::string>>();
    doc.meta.servers = meta.at("servers").get<std::vector<std::string>>();
    doc.meta.covariate_names = meta.at("covariate_names").get<std::vector<std::string>>();
    const std::string scheme = meta.at("scheme").get<std::string>();
    if (!scheme.empty()) {
      doc.meta.scheme = parse_scheme(scheme);
      if (!doc.meta.scheme) throw DataError("model file: unknown covariate scheme '" + scheme + "'");
    }
    doc.meta.serve_number = meta.at("serve_number").get<int>();
    return doc;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("model file is malformed: ") + e.what());
  } catch (const NumericalError& e) {
    throw DataError(std::string("model file holds invalid parameters: ") + e.what());
  }
}

void write_model_file(const std::filesystem::path& path, const ModelDocument& doc) {
  atomic_write(path, model_to_string(doc));
}

ModelDocument read_model_file(const std::filesystem::path& path) { return model_from_string(read_file(path)); }

namespace {

ordered_json nullable(double v) { return std::isfinite(v) ? ordered_json(v) : ordered_json(nullptr); }

template <typename Report>
std::string report_string(const Report& r, const std::string& label) {
  ordered_json j;
  j["format_version"] = kModelFormatVersion;
  j["model"] = label;
  j["converged"] = r.converged;
  j["n_iters"] = r.n_iters;
  j["objective"] = nullable(r.objective());
  j["best_restart"] = r.best_restart;
  ordered_json restarts = ordered_json::array();
  for (double v : r.restart_objectives) restarts.push_back(nullable(v));
  j["restart_objectives"] = std::move(restarts);
  j["rescue_iterations"] = r.rescue_iterations;
  ordered_json trace = ordered_json::array();
  for (double v : r.objective_trace) trace.push_back(nullable(v));
  j["objective_trace"] = std::move(trace);
  j["loglik"] = nullable(r.per_point_loglik.size() ? r.per_point_loglik.sum() : 0.0);
  return j.dump(2) + "\n";
}

}  // namespace

std::string fit_report_to_string(const FitReport& report, const std::string& label) {
  return report_string(report, label);
}

std::string fit_report_to_string(const BaselineFitReport& report, const std::string& label) {
  return report_string(report, label);
}

std::string grid_to_string(const GridDocument& g) {
  g.spec.validate();
  if (g.values.rows() != g.spec.ny || g.values.cols() != g.spec.nx)
    throw DimensionMismatch("grid values must be ny x nx");
  std::string out = "#format_version=" + std::to_string(kGridFormatVersion) + "\n";
  out += "kind=" + g.kind + "\n";
  out += "x_min=" + format_double(g.spec.x_min) + "\n";
  out += "x_max=" + format_double(g.spec.x_max) + "\n";
  out += "nx=" + std::to_string(g.spec.nx) + "\n";
  out += "y_min=" + format_double(g.spec.y_min) + "\n";
  out += "y_max=" + format_double(g.spec.y_max) + "\n";
  out += "ny=" + std::to_string(g.spec.ny) + "\n";
  out += "receiver=" + g.receiver + "\n";
  out += "server=" + g.server + "\n";
  out += "covariates=";
  for (Eigen::Index i = 0; i < g.covariates.size(); ++i) out += (i ? "," : "") + format_double(g.covariates(i));
  out += "\nvalues\n";
  for (int j = 0; j < g.spec.ny; ++j) {
    for (int i = 0; i < g.spec.nx; ++i) {
      if (i) out += ' ';
      out += format_double(g.values(j, i));
    }
    out += '\n';
  }
  return out;
}

namespace {

double to_double(const std::string& s) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw DataError("grid file: bad number '" + s + "'");
  return v;
}

}  // namespace

GridDocument grid_from_string(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("#format_version=", 0) != 0)
    throw VersionMismatch("grid file has no format_version line");
  if (line.substr(16) != std::to_string(kGridFormatVersion))
    throw VersionMismatch("grid file version " + line.substr(16) + " is not supported");
  GridDocument g;
  while (std::getline(in, line) && line != "values") {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError("grid file: malformed header line '" + line + "'");
    const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    if (key == "kind") g.kind = val;
    else if (key == "x_min") g.spec.x_min = to_double(val);
    else if (key == "x_max") g.spec.x_max = to_double(val);
    else if (key == "nx") g.spec.nx = std::stoi(val);
    else if (key == "y_min") g.spec.y_min = to_double(val);
    else if (key == "y_max") g.spec.y_max = to_double(val);
    else if (key == "ny") g.spec.ny = std::stoi(val);
    else if (key == "receiver") g.receiver = val;
    else if (key == "server") g.server = val;
    else if (key == "covariates") {
      std::vector<double> cs;
      std::istringstream cv(val);
      std::string tok;
      while (std::getline(cv, tok, ',')) cs.push_back(to_double(tok));
      g.covariates = Eigen::Map<Eigen::VectorXd>(cs.data(), static_cast<Eigen::Index>(cs.size()));
    } else throw DataError("grid file: unknown key '" + key + "'");
  }
  g.spec.validate();
  g.values.resize(g.spec.ny, g.spec.nx);
  for (int j = 0; j < g.spec.ny; ++j) {
    if (!std::getline(in, line)) throw DataError("grid file: too few rows");
    std::istringstream row(line);
    std::string tok;
    for (int i = 0; i < g.spec.nx; ++i) {
      if (!(row >> tok)) throw DataError("grid file: too few values in a row");
      g.values(j, i) = to_double(tok);
    }
  }
  return g;
}

}  // namespace lsa::io
