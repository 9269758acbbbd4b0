#include "lsa/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lsa/baselines.hpp"
#include "lsa/dataset.hpp"
#include "lsa/error.hpp"
#include "lsa/inference.hpp"
#include "lsa/model_file.hpp"
#include "lsa/reports.hpp"
#include "lsa/sampler.hpp"
#include "lsa/selection.hpp"

namespace lsa::cli {

namespace {

namespace fs = std::filesystem;

struct Globals {
  std::uint64_t seed = 1;
  int threads = 1;
};

struct DataOptions {
  std::string path;
  std::string scheme = "full";
  int serve_number = 1;
  bool skip_filters = false;
  int min_match_points = 30;
  int min_receiver_matches = 3;

  void add(CLI::App* cmd) {
    cmd->add_option("--data", path, "Return-impact CSV")->required()->check(CLI::ExistingFile);
    cmd->add_option("--scheme", scheme, "Covariate scheme")
        ->check(CLI::IsMember({"intercept", "surface", "full"}))
        ->capture_default_str();
    cmd->add_option("--serve-number", serve_number, "Serve number to model")
        ->check(CLI::IsMember({1, 2}))
        ->capture_default_str();
    cmd->add_flag("--skip-filters", skip_filters, "Do not apply the match and receiver inclusion filters");
    cmd->add_option("--min-match-points", min_match_points, "Match inclusion threshold")->capture_default_str();
    cmd->add_option("--min-receiver-matches", min_receiver_matches, "Receiver inclusion threshold")
        ->capture_default_str();
  }
};

struct FitOptions {
  int restarts = 5;
  int max_iters = 500;
  double tol = 1e-7;
  std::string init = "kmeans";

  void add(CLI::App* cmd) {
    cmd->add_option("--restarts", restarts, "EM restarts")->check(CLI::PositiveNumber)->capture_default_str();
    cmd->add_option("--max-iters", max_iters, "EM iteration cap")->check(CLI::PositiveNumber)->capture_default_str();
    cmd->add_option("--tol", tol, "Relative objective tolerance")->check(CLI::PositiveNumber)->capture_default_str();
    cmd->add_option("--init", init, "Initialisation")
        ->check(CLI::IsMember({"kmeans", "prior"}))
        ->capture_default_str();
  }

  FitConfig config(const Globals& g) const {
    FitConfig cfg;
    cfg.n_restarts = restarts;
    cfg.max_iters = max_iters;
    cfg.rel_tol = tol;
    cfg.init_scheme = init == "prior" ? InitScheme::PriorDraw : InitScheme::KMeansPatternMeans;
    cfg.seed = derive_seed(g.seed, "fit");
    cfg.threads = g.threads;
    return cfg;
  }
};

io::Dataset load_dataset(const DataOptions& o, std::ostream& err) {
  std::vector<io::RawReturnRecord> records = io::load_csv(o.path);
  if (!o.skip_filters) {
    io::FilterSettings fs{o.min_match_points, o.min_receiver_matches};
    io::FilterResult fr = io::apply_filters(records, fs);
    err << "filters: dropped " << fr.report.matches_dropped << " matches (" << fr.report.records_dropped_by_match_rule
        << " records), " << fr.report.receivers_dropped << " receivers (" << fr.report.records_dropped_by_receiver_rule
        << " records)\n";
    records = std::move(fr.kept);
  }
  io::Dataset ds = io::encode_covariates(records, *io::parse_scheme(o.scheme), o.serve_number);
  if (ds.data.empty()) throw EmptyData("no observations remain after filtering");
  if (ds.missing_direction > 0)
    err << "note: " << ds.missing_direction << " records have no serve direction\n";
  return ds;
}

io::ModelMetadata metadata_of(const io::Dataset& ds) {
  return io::ModelMetadata{ds.receiver_roster, ds.server_roster, ds.covariate_names, ds.scheme, ds.serve_number};
}

std::string fmt(const char* pattern, int value) {
  char buf[32];
  std::snprintf(buf, sizeof buf, pattern, value);
  return buf;
}

// ---------------------------------------------------------------------------

struct SimulateCmd {
  int K = 3, M = 3, receivers = 40, servers = 0, points = 500, points_per_match = 50, serve_number = 1;
  std::string scheme = "full";
  std::string truth = "structured";
  std::string out_data, out_truth;

  void add(CLI::App* app) {
    auto* cmd = app->add_subcommand("simulate", "Simulate a dataset and write it with its ground truth");
    cmd->add_option("--K", K, "Styles")->check(CLI::PositiveNumber)->capture_default_str();
    cmd->add_option("--M", M, "Patterns")->check(CLI::PositiveNumber)->capture_default_str();
    cmd->add_option("--receivers", receivers, "Receivers")->check(CLI::PositiveNumber)->capture_default_str();
    cmd->add_option("--servers", servers, "Servers (default: same as receivers)")->check(CLI::NonNegativeNumber);
    cmd->add_option("--points", points, "Points per receiver")->check(CLI::PositiveNumber)->capture_default_str();
    cmd->add_option("--points-per-match", points_per_match, "Points grouped into each synthetic match")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    cmd->add_option("--serve-number", serve_number, "Serve number written to the CSV")
        ->check(CLI::IsMember({1, 2}))
        ->capture_default_str();
    cmd->add_option("--scheme", scheme, "Covariate scheme")
        ->check(CLI::IsMember({"intercept", "surface", "full"}))
        ->capture_default_str();
    cmd->add_option("--truth", truth, "structured, prior, or a model file to sample from")->capture_default_str();
    cmd->add_option("--out-data", out_data, "Dataset CSV to write")->required();
    cmd->add_option("--out-truth", out_truth, "Truth model file to write")->required();
    cmd->callback([] {});
    this->cmd = cmd;
  }

  int exec(const Globals& g, std::ostream& out, std::ostream&) const {
    const int S = servers > 0 ? servers : receivers;
    const io::CovariateScheme sch = *io::parse_scheme(scheme);
    Rng param_rng = make_stream(g.seed, "simulate-params");
    LsaParams params;
    io::ModelMetadata meta;
    if (truth == "structured") {
      StructuredTruthOptions opt;
      opt.K = K;
      opt.M = M;
      opt.R = receivers;
      opt.S = S;
      opt.scheme = sch;
      params = structured_truth(opt, param_rng);
    } else if (truth == "prior") {
      SimConfig sc;
      sc.K = K;
      sc.M = M;
      sc.R = receivers;
      sc.S = S;
      sc.covariate_scheme = sch;
      params = draw_params(sc, param_rng);
    } else {
      io::ModelDocument doc = io::read_model_file(truth);
      if (!doc.is_lsa()) throw DataError("truth model file must hold an LSA model");
      params = std::get<LsaParams>(doc.params);
      if (!doc.meta.scheme) throw DataError("truth model file does not name its covariate scheme");
      if (*doc.meta.scheme != sch) throw DataError("truth model file uses a different covariate scheme");
    }
    SimConfig sc;
    sc.K = params.K;
    sc.M = params.M;
    sc.R = params.n_receivers();
    sc.S = params.n_servers();
    sc.n_obs_per_receiver = {points};
    sc.covariate_scheme = sch;
    sc.param_source = ParamSource::Explicit;
    sc.explicit_params = params;
    sc.priors = params.priors;
    Rng data_rng = make_stream(g.seed, "simulate-data");
    const SimulatedData sim = sample_dataset(params, sc, data_rng);

    for (int i = 0; i < sc.R; ++i) meta.receivers.push_back(fmt("R%03d", i + 1));
    for (int s = 0; s < sc.S; ++s) meta.servers.push_back(fmt("S%03d", s + 1));
    meta.covariate_names = io::covariate_names(sch);
    meta.scheme = sch;
    meta.serve_number = serve_number;

    std::vector<io::RawReturnRecord> records;
    std::vector<int> seen(static_cast<std::size_t>(sc.R), 0);
    for (std::size_t n = 0; n < sim.data.obs.size(); ++n) {
      const auto& o = sim.data.obs[n];
      const auto& ctx = sim.contexts[n];
      const int match = seen[static_cast<std::size_t>(o.receiver_id)]++ / points_per_match;
      io::RawReturnRecord r;
      r.receiver = meta.receivers[static_cast<std::size_t>(o.receiver_id)];
      r.server = meta.servers[static_cast<std::size_t>(o.server_id)];
      r.match_id = r.receiver + fmt("-M%03d", match + 1);
      r.serve_number = serve_number;
      r.court_side = ctx.side;
      r.serve_direction = ctx.direction;
      r.surface = ctx.surface;
      r.lateral = o.location(0);
      r.depth = o.location(1);
      r.date = "2020-" + fmt("%02d", match / 28 % 12 + 1) + "-" + fmt("%02d", match % 28 + 1);
      records.push_back(std::move(r));
    }
    // Receiver rosters are sorted by name on load; the zero-padded names keep
    // the simulated indices aligned with that order.
    std::ostringstream csv;
    io::write_csv(csv, records);
    io::atomic_write(out_data, csv.str());
    io::write_model_file(out_truth, io::ModelDocument{params, meta});
    out << "wrote " << records.size() << " records to " << out_data << "\n";
    return kExitOk;
  }

  CLI::App* cmd = nullptr;
};

struct FitCmd {
  DataOptions data;
  FitOptions fit;
  int K = 3, M = 3;
  std::string family = "lsa";
  std::string out_model, out_report;
  bool polish = false;

  void add(CLI::App* app) {
    cmd = app->add_subcommand("fit", "Fit a model by penalised EM");
    data.add(cmd);
    fit.add(cmd);
    cmd->add_option("--K", K, "Styles (lsa only)")->check(CLI::PositiveNumber)->capture_default_str();
    cmd->add_option("--M", M, "Patterns / mixture components")->check(CLI::PositiveNumber)->capture_default_str();
    cmd->add_option("--family", family, "Model family")
        ->check(CLI::IsMember({"lsa", "mvn", "finite_mixture", "mixed_membership"}))
        ->capture_default_str();
    cmd->add_flag("--polish", polish, "Finish with L-BFGS on the full objective (lsa only)");
    cmd->add_option("--out-model", out_model, "Model file to write")->required();
    cmd->add_option("--out-report", out_report, "Fit report to write")->required();
  }

  int exec(const Globals& g, std::ostream& out, std::ostream& err) const {
    const io::Dataset ds = load_dataset(data, err);
    FitConfig cfg = fit.config(g);
    cfg.gradient_polish = polish;
    const std::string label = family == "lsa" ? "lsa" : family;
    try {
      if (family == "lsa") {
        const FitReport rep = lsa::fit(ds.data, K, M, cfg);
        io::write_model_file(out_model, io::ModelDocument{rep.params, metadata_of(ds)});
        io::atomic_write(out_report, io::fit_report_to_string(rep, label));
        out << "objective " << io::format_double(rep.objective()) << " after " << rep.n_iters << " iterations"
            << (rep.converged ? " (converged)" : " (not converged)") << "\n";
      } else {
        BaselineKind kind;
        kind.tag = family == "mvn"              ? BaselineFamily::MVN
                   : family == "finite_mixture" ? BaselineFamily::FiniteMixture
                                                : BaselineFamily::MixedMembership;
        kind.M = kind.tag == BaselineFamily::MVN ? 1 : M;
        const BaselineFitReport rep = baseline_fit(ds.data, kind, cfg);
        io::write_model_file(out_model, io::ModelDocument{rep.params, metadata_of(ds)});
        io::atomic_write(out_report, io::fit_report_to_string(rep, label));
        out << "objective " << io::format_double(rep.objective()) << " after " << rep.n_iters << " iterations"
            << (rep.converged ? " (converged)" : " (not converged)") << "\n";
      }
    } catch (const NumericalError& e) {
      io::atomic_write(out_report, std::string("{\n  \"model\": \"") + label +
                                       "\",\n  \"converged\": false,\n  \"error\": \"numerical failure\"\n}\n");
      throw;
    }
    return kExitOk;
  }

  CLI::App* cmd = nullptr;
};

struct SelectCmd {
  DataOptions data;
  FitOptions fit;
  int K_min = 2, K_max = 8, M_min = 2, M_max = 8, folds = 5;
  std::string out_path;

  void add(CLI::App* app) {
    cmd = app->add_subcommand("select", "Cross-validated ELPD over a (K, M) grid");
    data.add(cmd);
    fit.add(cmd);
    cmd->add_option("--K-min", K_min)->check(CLI::PositiveNumber)->capture_default_str();
    cmd->add_option("--K-max", K_max)->check(CLI::PositiveNumber)->capture_default_str();
    cmd->add_option("--M-min", M_min)->check(CLI::PositiveNumber)->capture_default_str();
    cmd->add_option("--M-max", M_max)->check(CLI::PositiveNumber)->capture_default_str();
    cmd->add_option("--folds", folds, "Cross-validation folds")->check(CLI::Range(2, 1000))->capture_default_str();
    cmd->add_option("--out", out_path, "Grid CSV to write")->required();
  }

  int exec(const Globals& g, std::ostream& out, std::ostream& err) const {
    const io::Dataset ds = load_dataset(data, err);
    CvSettings cv;
    cv.folds = folds;
    cv.fit = fit.config(g);
    cv.fit.seed = derive_seed(g.seed, "select");
    cv.threads = g.threads;
    const GridResult res =
        grid_search(ds.data, {K_min, K_max}, {M_min, M_max}, cv, [&](const std::string& msg) { err << msg << "\n"; });
    io::atomic_write(out_path, io::grid_table_csv(res));
    out << "best K=" << res.best.first << " M=" << res.best.second << "\n";
    return kExitOk;
  }

  CLI::App* cmd = nullptr;
};

struct CompareCmd {
  DataOptions data;
  FitOptions fit;
  int K = 3, M = 3, folds = 5;
  std::string out_path;

  void add(CLI::App* app) {
    cmd = app->add_subcommand("compare", "Cross-validated ELPD of the four model families");
    data.add(cmd);
    fit.add(cmd);
    cmd->add_option("--K", K, "LSA styles")->check(CLI::PositiveNumber)->capture_default_str();
    cmd->add_option("--M", M, "Components for every mixture family")->check(CLI::PositiveNumber)->capture_default_str();
    cmd->add_option("--folds", folds, "Cross-validation folds")->check(CLI::Range(2, 1000))->capture_default_str();
    cmd->add_option("--out", out_path, "Comparison CSV to write")->required();
  }

  int exec(const Globals& g, std::ostream& out, std::ostream& err) const {
    const io::Dataset ds = load_dataset(data, err);
    CvSettings cv;
    cv.folds = folds;
    cv.fit = fit.config(g);
    cv.fit.seed = derive_seed(g.seed, "compare");
    cv.threads = g.threads;
    const auto rows = compare_families(ds.data, K, M, cv, [&](const std::string& msg) { err << msg << "\n"; });
    const std::string csv = io::elpd_table_csv(rows);
    io::atomic_write(out_path, csv);
    out << csv;
    return kExitOk;
  }

  CLI::App* cmd = nullptr;
};

struct SummarizeCmd {
  std::string model, out_styles, out_weights, out_patterns, label;

  void add(CLI::App* app) {
    cmd = app->add_subcommand("summarize", "Style summaries of a fitted LSA model");
    cmd->add_option("--model", model, "LSA model file")->required()->check(CLI::ExistingFile);
    cmd->add_option("--out-styles", out_styles, "Players by highest-weight style (CSV)")->required();
    cmd->add_option("--out-weights", out_weights, "Per-player style weights (CSV)");
    cmd->add_option("--out-patterns", out_patterns, "Pattern weights per style (CSV)");
    cmd->add_option("--label", label, "Row label (default: serve_<n>)");
  }

  int exec(const Globals&, std::ostream& out, std::ostream&) const {
    const io::ModelDocument doc = io::read_model_file(model);
    if (!doc.is_lsa()) throw DataError("summarize needs an LSA model file");
    const auto& p = std::get<LsaParams>(doc.params);
    const std::string row = label.empty() ? "serve_" + std::to_string(doc.meta.serve_number) : label;
    const std::string styles = io::max_style_csv(row, p.pi);
    io::atomic_write(out_styles, styles);
    if (!out_weights.empty()) io::atomic_write(out_weights, io::player_weights_csv(p.pi, doc.meta.receivers));
    if (!out_patterns.empty()) io::atomic_write(out_patterns, io::style_patterns_csv(stick_break(p.betas)));
    out << styles;
    return kExitOk;
  }

  CLI::App* cmd = nullptr;
};

struct GridCmd {
  std::string model, kind = "tour", receiver, server, side = "deuce", direction = "wide", surface = "hard", out_path;
  int nx = 200, ny = 200;
  std::vector<double> bbox;
  double n_sd = 8.0;

  void add(CLI::App* app) {
    cmd = app->add_subcommand("grid", "Posterior predictive density grids");
    cmd->add_option("--model", model, "Model file")->required()->check(CLI::ExistingFile);
    cmd->add_option("--kind", kind, "tour, component or player")
        ->check(CLI::IsMember({"tour", "component", "player"}))
        ->capture_default_str();
    cmd->add_option("--receiver", receiver, "Receiver name (player grids)");
    cmd->add_option("--server", server, "Server name (adds that server's offset)");
    cmd->add_option("--side", side, "Court side")->check(CLI::IsMember({"deuce", "ad"}))->capture_default_str();
    cmd->add_option("--direction", direction, "Serve direction, or none")
        ->check(CLI::IsMember({"wide", "body", "t", "none"}))
        ->capture_default_str();
    cmd->add_option("--surface", surface, "Surface")
        ->check(CLI::IsMember({"clay", "grass", "hard"}))
        ->capture_default_str();
    cmd->add_option("--nx", nx, "Cells along the lateral axis")->check(CLI::Range(2, 100000))->capture_default_str();
    cmd->add_option("--ny", ny, "Cells along the depth axis")->check(CLI::Range(2, 100000))->capture_default_str();
    cmd->add_option("--bbox", bbox, "x_min x_max y_min y_max (default: covers every component)")->expected(4);
    cmd->add_option("--n-sd", n_sd, "Default box half-width in marginal sds")->capture_default_str();
    cmd->add_option("--out", out_path, "Grid file; component grids insert _component<m> before the extension")
        ->required();
  }

  static int find_name(const std::vector<std::string>& roster, const std::string& name, const char* what) {
    for (std::size_t i = 0; i < roster.size(); ++i)
      if (roster[i] == name) return static_cast<int>(i);
    throw DataError(std::string("unknown ") + what + " '" + name + "'");
  }

  int exec(const Globals&, std::ostream& out, std::ostream&) const {
    const io::ModelDocument doc = io::read_model_file(model);
    const GaussianLayer& layer = doc.layer();
    io::CovariateScheme scheme;
    if (doc.meta.scheme) scheme = *doc.meta.scheme;
    else if (layer.n_covariates() == 1) scheme = io::CovariateScheme::Intercept;
    else throw DataError("model file does not name its covariate scheme");
    io::ServeContext ctx;
    ctx.side = *io::parse_court_side(side);
    ctx.surface = *io::parse_surface(surface);
    if (direction == "none") ctx.direction.reset();
    else ctx.direction = *io::parse_serve_direction(direction);

    PredictiveContext pc;
    pc.covariates = io::encode_context(ctx, scheme);
    if (kind == "player") {
      if (receiver.empty()) throw Error("player grids need --receiver");
      pc.receiver = find_name(doc.meta.receivers, receiver, "receiver");
    } else if (!receiver.empty()) {
      throw Error("--receiver only applies to player grids");
    }
    if (!server.empty()) pc.server = find_name(doc.meta.servers, server, "server");

    Eigen::RowVectorXd weights;
    if (doc.is_lsa()) {
      weights = pattern_weights(std::get<LsaParams>(doc.params), pc);
    } else {
      const auto& b = std::get<BaselineParams>(doc.params);
      weights = pc.receiver ? b.weights_for(*pc.receiver) : Eigen::RowVectorXd(b.weights.colwise().mean());
    }

    const auto make_spec = [&](const Eigen::RowVectorXd& w) {
      if (bbox.size() == 4) {
        GridSpec g{bbox[0], bbox[1], nx, bbox[2], bbox[3], ny};
        g.validate();
        return g;
      }
      return covering_grid(layer, w, pc, nx, ny, n_sd);
    };
    const auto describe = [&](io::GridDocument& g) {
      g.receiver = pc.receiver ? receiver : "none";
      g.server = pc.server ? server : "none";
      g.covariates = pc.covariates;
    };

    if (kind == "component") {
      const fs::path base(out_path);
      for (int m = 0; m < layer.n_patterns(); ++m) {
        Eigen::RowVectorXd unit = Eigen::RowVectorXd::Zero(layer.n_patterns());
        unit(m) = 1.0;
        io::GridDocument g;
        g.spec = make_spec(unit);
        g.kind = "component" + std::to_string(m + 1);
        g.values = mixture_grid(layer, unit, pc, g.spec);
        describe(g);
        fs::path p = base.parent_path() /
                     (base.stem().string() + "_component" + std::to_string(m + 1) + base.extension().string());
        io::atomic_write(p, io::grid_to_string(g));
        out << "wrote " << p.string() << "\n";
      }
      return kExitOk;
    }
    io::GridDocument g;
    g.spec = make_spec(weights);
    g.kind = kind;
    g.values = mixture_grid(layer, weights, pc, g.spec);
    describe(g);
    io::atomic_write(out_path, io::grid_to_string(g));
    out << "wrote " << out_path << "\n";
    return kExitOk;
  }

  CLI::App* cmd = nullptr;
};

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Latent style allocation models for 2D return-impact locations", "lsa"};
  app.require_subcommand(1, 1);
  app.allow_config_extras(CLI::config_extras_mode::error);
  Globals g;
  app.add_option("--seed", g.seed, "Master random seed")->capture_default_str();
  app.add_option("--threads", g.threads, "Worker threads")->check(CLI::PositiveNumber)->capture_default_str();
  app.set_config("--config", "", "TOML config file; command-line flags take precedence");

  SimulateCmd simulate;
  FitCmd fit;
  SelectCmd select;
  CompareCmd compare;
  SummarizeCmd summarize;
  GridCmd grid;
  simulate.add(&app);
  fit.add(&app);
  select.add(&app);
  compare.add(&app);
  summarize.add(&app);
  grid.add(&app);
  for (auto* sub : app.get_subcommands({})) sub->allow_config_extras(CLI::config_extras_mode::error);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return kExitOk;
    }
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (*simulate.cmd) return simulate.exec(g, out, err);
    if (*fit.cmd) return fit.exec(g, out, err);
    if (*select.cmd) return select.exec(g, out, err);
    if (*compare.cmd) return compare.exec(g, out, err);
    if (*summarize.cmd) return summarize.exec(g, out, err);
    if (*grid.cmd) return grid.exec(g, out, err);
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace lsa::cli
