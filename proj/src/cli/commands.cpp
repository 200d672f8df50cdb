#include <CLI11.hpp>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <json.hpp>
#include <ostream>
#include <set>
#include <sstream>

#include "dtr/cli.hpp"
#include "dtr/error.hpp"
#include "dtr/parallel.hpp"
#include "dtr/simulation.hpp"

namespace dtr::cli {

namespace {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

std::uint64_t parse_seed(const std::string& text, const std::string& what) {
  std::uint64_t value = 0;
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || end != text.data() + text.size() || text.empty())
    throw SpecError(what + ": '" + text + "' is not a non-negative integer seed");
  return value;
}

std::optional<std::uint64_t> environment_seed() {
  const char* text = std::getenv("DTR_ADHERE_SEED");
  if (!text || !*text) return std::nullopt;
  return parse_seed(text, "DTR_ADHERE_SEED");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

std::optional<double> parse_number(const std::string& raw) {
  const std::string text = trim(raw);
  if (text.empty()) return std::nullopt;
  double value = 0.0;
  const char* first = text.data();
  if (*first == '+') ++first;
  const auto [end, ec] = std::from_chars(first, text.data() + text.size(), value);
  if (ec != std::errc{} || end != text.data() + text.size() || !std::isfinite(value))
    throw DataError("cannot parse '" + raw + "' as a number");
  return value;
}

std::string cell_where(std::size_t row, const std::string& column) {
  return "row " + std::to_string(row + 1) + ", column '" + column + "'";
}

// ---- config JSON helpers ---------------------------------------------------

void check_keys(const json& object, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!object.is_object()) throw SpecError(where + ": expected an object");
  for (const auto& [key, value] : object.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw SpecError(where + ": unknown key '" + key + "'");
  }
}

template <class T>
T required(const json& object, const char* key, const std::string& where) {
  if (!object.contains(key)) throw SpecError(where + ": missing '" + key + "'");
  return object.at(key).get<T>();
}

Eigen::VectorXd to_vector(const json& array) {
  const auto values = array.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
}

Eigen::MatrixXd to_matrix(const json& rows) {
  const auto values = rows.get<std::vector<std::vector<double>>>();
  Eigen::MatrixXd m(static_cast<Eigen::Index>(values.size()), values.empty() ? 0 : values.front().size());
  for (std::size_t r = 0; r < values.size(); ++r) {
    if (values[r].size() != static_cast<std::size_t>(m.cols())) throw SpecError("covariance rows differ in length");
    for (std::size_t c = 0; c < values[r].size(); ++c) m(r, c) = values[r][c];
  }
  return m;
}

json to_json(const Eigen::VectorXd& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

json term_names(const FeatureSpec& spec) {
  json out = json::array();
  for (const auto& t : spec.terms) out.push_back(to_string(t));
  return out;
}

json glm_json(const FeatureSpec& spec, const GlmFit& fit, const char* name) {
  return {{"terms", term_names(spec)},
          {name, to_json(fit.coefficients)},
          {"converged", fit.converged},
          {"iterations", fit.iterations},
          {"boundary_rows", fit.boundary_rows}};
}

// ---- output ----------------------------------------------------------------

/// Output files are assembled in memory and written only once every step has
/// succeeded.
struct Outputs {
  std::vector<std::pair<std::string, std::string>> files;
  void add(std::string name, std::string content) { files.emplace_back(std::move(name), std::move(content)); }
  void write(const fs::path& dir) const {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw SpecError("cannot create output directory '" + dir.string() + "': " + ec.message());
    for (const auto& [name, content] : files) {
      std::ofstream out(dir / name, std::ios::binary | std::ios::trunc);
      out << content;
      if (!out) throw SpecError("cannot write '" + (dir / name).string() + "'");
    }
  }
};

std::string dump(const json& j) { return j.dump(2) + "\n"; }

// ---- simulate --------------------------------------------------------------

struct SimulateArgs {
  std::string scenario;
  std::size_t n = 1000;
  int reps = 1;
  double validation = 0.3;
  double param = 0.0;
  std::string estimators;
  std::optional<std::string> seed;
  std::string out;
  bool coverage = false;
  bool exact = false;
  double level = 0.95;
  std::string s3_indicator = "actual";
  int jobs = 1;
};

json config_json(const ScenarioConfig& c) {
  json estimators = json::array();
  for (auto e : c.estimators) estimators.push_back(to_string(e));
  return {{"scenario", to_string(c.scenario)},
          {"n", c.n},
          {"validation", c.validation_fraction},
          {"param", c.varied_param},
          {"replications", c.replications},
          {"seed", c.seed},
          {"estimators", estimators},
          {"coverage", c.coverage},
          {"level", c.level},
          {"exact_pseudo_outcomes", c.exact_pseudo_outcomes},
          {"s3_treatment_free", c.s3_treatment_free == S3Indicator::Actual ? "actual" : "prescribed"}};
}

void write_simulation(const ReplicationSummary& summary, const std::string& dir, std::ostream& out);

int simulate(const SimulateArgs& args, std::ostream& out) {
  ScenarioConfig config;
  config.scenario = parse_scenario(args.scenario);
  config.n = args.n;
  config.replications = args.reps;
  config.validation_fraction = args.validation;
  config.varied_param = args.param;
  config.coverage = args.coverage;
  config.exact_pseudo_outcomes = args.exact;
  config.level = args.level;
  config.jobs = args.jobs;
  if (args.s3_indicator == "actual")
    config.s3_treatment_free = S3Indicator::Actual;
  else if (args.s3_indicator == "prescribed")
    config.s3_treatment_free = S3Indicator::Prescribed;
  else
    throw SpecError("unknown s3 treatment-free indicator '" + args.s3_indicator + "'");
  if (!args.estimators.empty()) {
    config.estimators.clear();
    std::stringstream list(args.estimators);
    for (std::string item; std::getline(list, item, ',');) config.estimators.push_back(parse_estimator(trim(item)));
  }
  if (args.seed)
    config.seed = parse_seed(*args.seed, "--seed");
  else if (auto env = environment_seed())
    config.seed = *env;
  if (config.scenario == Scenario::S2) config.varied_param = 0.0;
  validate(config);
  if (config.jobs < 1) throw SpecError("--jobs must be at least 1");

  try {
    write_simulation(run_replications(config), args.out, out);
  } catch (const ReplicationFailure& e) {
    // Diagnostics are still written; the exit status reports the breach.
    write_simulation(e.summary(), args.out, out);
    throw;
  }
  return 0;
}

void write_simulation(const ReplicationSummary& summary, const std::string& dir, std::ostream& out) {
  const ScenarioConfig& config = summary.config;
  const auto names = psi_parameter_names(config);
  const auto stages = psi_parameter_stages(config);

  json estimators = json::array();
  for (const auto& e : summary.estimators) {
    json params = json::array();
    for (const auto& p : e.parameters) {
      json row = {{"name", p.name}, {"stage", p.stage}, {"truth", p.truth}};
      const auto stat = [&](double v) { return e.successes > 0 ? json(v) : json(nullptr); };
      row["mean"] = stat(p.mean);
      row["bias"] = stat(p.bias);
      row["variance"] = stat(p.variance);
      row["mse"] = stat(p.mse);
      row["mse100"] = stat(p.mse100);
      row["mc_se"] = stat(p.mc_se);
      if (config.coverage) row["coverage"] = p.coverage ? json(*p.coverage) : json(nullptr);
      params.push_back(row);
    }
    estimators.push_back({{"estimator", to_string(e.estimator)},
                          {"successes", e.successes},
                          {"failures", e.failures},
                          {"parameters", params}});
  }
  json failures = json::array();
  for (const auto& r : summary.records)
    if (r.failed) failures.push_back({{"replicate", r.replicate}, {"estimator", to_string(r.estimator)}, {"error", r.error}});

  std::ostringstream estimates, intervals;
  write_csv_row(estimates, {"replicate", "estimator", "stage", "parameter", "value"});
  write_csv_row(intervals, {"replicate", "estimator", "stage", "parameter", "lower", "upper"});
  for (const auto& r : summary.records) {
    for (std::size_t k = 0; k < names.size(); ++k) {
      const auto idx = static_cast<Eigen::Index>(k);
      const std::string rep = std::to_string(r.replicate), est = to_string(r.estimator),
                        stage = std::to_string(stages[k]);
      write_csv_row(estimates, {rep, est, stage, names[k], r.failed ? "" : format_double(r.estimates(idx))});
      if (config.coverage)
        write_csv_row(intervals, {rep, est, stage, names[k], r.failed ? "" : format_double(r.lower(idx)),
                                  r.failed ? "" : format_double(r.upper(idx))});
    }
  }

  Outputs files;
  files.add("config.json", dump(config_json(config)));
  files.add("summary.json", dump({{"replications", config.replications},
                                  {"estimators", estimators},
                                  {"failed_replicates", failures}}));
  files.add("estimates.csv", estimates.str());
  if (config.coverage) files.add("intervals.csv", intervals.str());
  files.write(dir);
  out << "wrote " << files.files.size() << " files to " << dir << "\n";
}

int generate_data(const SimulateArgs& args, std::ostream& out) {
  ScenarioConfig config;
  config.scenario = parse_scenario(args.scenario);
  config.n = args.n;
  config.validation_fraction = args.validation;
  config.varied_param = config.scenario == Scenario::S2 ? 0.0 : args.param;
  if (args.s3_indicator == "prescribed") config.s3_treatment_free = S3Indicator::Prescribed;
  else if (args.s3_indicator != "actual")
    throw SpecError("unknown s3 treatment-free indicator '" + args.s3_indicator + "'");
  if (args.seed)
    config.seed = parse_seed(*args.seed, "--seed");
  else if (auto env = environment_seed())
    config.seed = *env;
  validate(config);

  // Stream 0 reproduces the first replicate of `simulate` with the same seed.
  auto rng = make_stream(config.seed, 0);
  std::ostringstream csv;
  write_dataset_csv(generate(config, rng), csv);
  const fs::path path = args.out;
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  file << csv.str();
  if (!file) throw SpecError("cannot write '" + path.string() + "'");
  out << "wrote " << config.n << " rows to " << path.string() << "\n";
  return 0;
}

// ---- analyze / sensitivity -------------------------------------------------

struct AnalyzeArgs {
  std::string config;
  std::string grid;
  std::optional<std::string> out;
  std::optional<std::string> seed;
  std::optional<int> jobs;
};

struct Prepared {
  AnalysisConfig config;
  std::vector<StageModelSpec> specs;
  LoadedData loaded;
  fs::path out;
};

Prepared prepare(const AnalyzeArgs& args) {
  Prepared p{load_analysis_config(args.config), {}, {}, {}};
  if (args.seed) p.config.seed = parse_seed(*args.seed, "--seed");
  if (!p.config.seed) p.config.seed = environment_seed();
  if (args.jobs) p.config.jobs = *args.jobs;
  if (p.config.jobs < 1) throw SpecError("jobs must be at least 1");
  if (args.out)
    p.out = *args.out;
  else if (p.config.output)
    p.out = *p.config.output;
  else
    throw SpecError("no output directory: pass --out or set \"output\" in the config");
  p.specs = model_specs(p.config);
  p.loaded = load_dataset(p.config, read_csv(p.config.input));
  return p;
}

json stage_json(const RegimeFit& fit, int j) {
  const auto& s = fit.stage(j);
  const auto& spec = fit.specs[static_cast<std::size_t>(j - 1)];
  json out = {{"stage", j},
              {"contrast", {{"terms", term_names(spec.contrast)}, {"psi", to_json(s.psi)}}},
              {"treatment_free", {{"terms", term_names(spec.treatment_free)}, {"beta", to_json(s.beta)}}},
              {"assignment", glm_json(spec.assignment, s.assignment_fit, "gamma")}};
  if (s.adherence_fit)
    out["adherence"] = glm_json(spec.adherence, *s.adherence_fit, "alpha");
  else if (s.alpha.size() > 0)
    out["adherence"] = {{"terms", term_names(spec.adherence)}, {"alpha", to_json(s.alpha)}};
  else
    out["adherence"] = nullptr;
  out["recommendation"] = {{"treat_when", "contrast > 0"},
                           {"terms", term_names(spec.contrast)},
                           {"coefficients", to_json(s.psi)}};
  out["diagnostics"] = {{"validation_rows", s.validation_rows},
                        {"positivity_warnings", s.positivity_warnings},
                        {"condition", s.condition},
                        {"exact_pseudo_outcome", s.exact_pseudo_outcome}};
  return out;
}

json interval_json(const RegimeFit& fit, const IntervalSet& set, const std::optional<SandwichResult>& sw) {
  json params = json::array();
  const auto names = psi_names(fit);
  std::size_t k = 0;
  for (int j = 1; j <= static_cast<int>(fit.stages.size()); ++j) {
    for (const auto& term : fit.specs[static_cast<std::size_t>(j - 1)].contrast.terms) {
      const auto& iv = set.intervals[k];
      json row = {{"name", names[k]}, {"stage", j}, {"term", to_string(term)}, {"estimate", iv.estimate},
                  {"lower", iv.lower}, {"upper", iv.upper}};
      if (sw) row["se"] = std::sqrt(sw->sigma_psi(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k)));
      params.push_back(row);
      ++k;
    }
  }
  json out = {{"method", to_string(set.method)}, {"level", set.level}};
  if (set.method == IntervalMethod::BootstrapPercentile) {
    out["replicates"] = set.replicates;
    out["failures"] = set.failures;
  }
  if (sw) {
    out["bread_condition"] = sw->bread_condition;
    out["fixed_directions"] = sw->fixed_directions;
  }
  out["parameters"] = params;
  return out;
}

int analyze(const AnalyzeArgs& args, std::ostream& out) {
  Prepared p = prepare(args);
  const auto& c = p.config;
  const Dataset& data = p.loaded.data;
  const EstimationOptions options{c.mode, c.exact_pseudo_outcomes};
  validate_estimation(data, p.specs, c.adherence_source, options);
  if (c.inference == Inference::Bootstrap && c.replicates < 2) throw SpecError("bootstrap needs at least 2 replicates");

  const RegimeFit fit = estimate_regime(data, p.specs, c.adherence_source, options);

  json result = {{"mode", to_string(c.mode)},
                 {"proxy", c.proxy == ProxyKind::Prescribed ? "prescribed" : "reported"},
                 {"adherence_source", to_string(c.adherence_source.kind)},
                 {"rows_read", p.loaded.rows_read},
                 {"rows_used", data.size()},
                 {"rows_dropped", p.loaded.rows_dropped}};
  json stages = json::array();
  for (int j = 1; j <= c.stages; ++j) stages.push_back(stage_json(fit, j));
  result["stages"] = stages;

  switch (c.inference) {
    case Inference::None: result["intervals"] = nullptr; break;
    case Inference::Sandwich: {
      const auto sw = regime_sandwich(data, fit);
      result["intervals"] = interval_json(fit, wald_intervals(flatten_psi(fit), sw.sigma_psi, c.level), sw);
      break;
    }
    case Inference::Bootstrap: {
      BootstrapConfig bc{p.specs, c.adherence_source, options, c.replicates, c.level, c.seed.value_or(1), c.jobs};
      result["seed"] = bc.seed;
      result["intervals"] = interval_json(fit, bootstrap(data, bc), std::nullopt);
      break;
    }
  }
  json warnings = json::array();
  for (const auto& w : fit.warnings) warnings.push_back(w);
  result["warnings"] = warnings;

  Outputs files;
  files.add("fit.json", dump(result));
  files.write(p.out);
  out << "analyzed " << data.size() << " of " << p.loaded.rows_read << " rows; wrote " << (p.out / "fit.json").string()
      << "\n";
  return 0;
}

int sensitivity(const AnalyzeArgs& args, std::ostream& out, std::ostream& err) {
  Prepared p = prepare(args);
  const auto& c = p.config;
  const Dataset& data = p.loaded.data;
  const EstimationOptions options{c.mode, c.exact_pseudo_outcomes};
  if (!is_modified(c.mode)) throw SpecError("sensitivity analysis requires a modified estimation mode");
  const auto grid = parse_grid(read_csv(args.grid), p.specs);
  validate_estimation(data, p.specs, AdherenceSource::sensitivity(grid.front()), options);

  const auto points = sensitivity_sweep(data, p.specs, grid, options);

  std::ostringstream sweep, agreement;
  write_csv_row(sweep, {"point", "stage", "parameter", "term", "value"});
  write_csv_row(agreement, {"point", "agreement", "error"});
  std::size_t failed = 0;
  for (std::size_t g = 0; g < points.size(); ++g) {
    const auto& point = points[g];
    const std::string id = std::to_string(g + 1);
    for (int j = 1; j <= c.stages; ++j) {
      const auto& terms = p.specs[static_cast<std::size_t>(j - 1)].contrast.terms;
      for (std::size_t t = 0; t < terms.size(); ++t) {
        const std::string name = "psi" + std::to_string(j) + std::to_string(t);
        const std::string value =
            point.fit ? format_double(point.fit->stage(j).psi(static_cast<Eigen::Index>(t))) : std::string{};
        write_csv_row(sweep, {id, std::to_string(j), name, to_string(terms[t]), value});
      }
    }
    std::string share;
    if (point.fit && points.front().fit)
      share = format_double(recommendation_agreement(data, *points.front().fit, *point.fit));
    if (!point.fit) {
      ++failed;
      err << "grid point " << id << ": " << point.error << "\n";
    }
    write_csv_row(agreement, {id, share, point.error});
  }
  if (failed == points.size()) throw EstimationError("every grid point failed");

  Outputs files;
  files.add("sweep.csv", sweep.str());
  files.add("agreement.csv", agreement.str());
  files.write(p.out);
  out << "swept " << points.size() << " grid points (" << failed << " failed); wrote " << p.out.string() << "\n";
  return 0;
}

}  // namespace

// ---- configuration ---------------------------------------------------------

AnalysisConfig parse_analysis_config(const std::string& json_text, const fs::path& base) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw SpecError(std::string("config is not valid JSON: ") + e.what());
  }
  try {
    check_keys(root,
               {"input", "stages", "id", "outcome", "proxy", "columns", "models", "mode", "adherence", "inference",
                "exact_pseudo_outcomes", "seed", "jobs", "output"},
               "config");
    AnalysisConfig c;
    c.input = required<std::string>(root, "input", "config");
    if (c.input.is_relative() && !base.empty()) c.input = base / c.input;
    c.stages = required<int>(root, "stages", "config");
    if (c.stages < 1) throw SpecError("config: 'stages' must be at least 1");
    if (root.contains("id")) c.id_column = root["id"].get<std::string>();
    c.outcome = required<std::string>(root, "outcome", "config");
    c.mode = parse_estimation_mode(required<std::string>(root, "mode", "config"));
    c.proxy = c.mode == EstimationMode::ModifiedReported ? ProxyKind::Reported : ProxyKind::Prescribed;
    if (root.contains("proxy")) {
      const auto kind = root["proxy"].get<std::string>();
      if (kind == "prescribed")
        c.proxy = ProxyKind::Prescribed;
      else if (kind == "reported")
        c.proxy = ProxyKind::Reported;
      else
        throw SpecError("config: unknown proxy kind '" + kind + "'");
    }

    const json& columns = root.contains("columns") ? root["columns"] : json{};
    const json& models = root.contains("models") ? root["models"] : json{};
    if (!columns.is_array() || columns.size() != static_cast<std::size_t>(c.stages))
      throw SpecError("config: 'columns' must list one entry per stage");
    if (!models.is_array() || models.size() != static_cast<std::size_t>(c.stages))
      throw SpecError("config: 'models' must list one entry per stage");
    for (int j = 0; j < c.stages; ++j) {
      const std::string where = "config: columns[" + std::to_string(j) + "]";
      const json& col = columns[static_cast<std::size_t>(j)];
      check_keys(col, {"covariates", "proxy", "actual", "validation"}, where);
      StageColumns sc;
      if (col.contains("covariates")) sc.covariates = col["covariates"].get<std::map<std::string, std::string>>();
      sc.proxy = required<std::string>(col, "proxy", where);
      if (col.contains("actual")) sc.actual = col["actual"].get<std::string>();
      if (col.contains("validation")) sc.validation = col["validation"].get<std::string>();
      c.columns.push_back(std::move(sc));

      const std::string mwhere = "config: models[" + std::to_string(j) + "]";
      const json& m = models[static_cast<std::size_t>(j)];
      check_keys(m, {"contrast", "treatment_free", "assignment", "adherence"}, mwhere);
      c.contrast.push_back(required<std::string>(m, "contrast", mwhere));
      c.treatment_free.push_back(required<std::string>(m, "treatment_free", mwhere));
      c.assignment.push_back(required<std::string>(m, "assignment", mwhere));
      c.adherence.push_back(m.contains("adherence") ? m["adherence"].get<std::string>() : std::string{});
    }

    if (root.contains("adherence")) {
      const json& a = root["adherence"];
      check_keys(a, {"source", "coefficients", "covariance"}, "config: adherence");
      const auto source = required<std::string>(a, "source", "config: adherence");
      std::vector<Eigen::VectorXd> coefs;
      if (a.contains("coefficients"))
        for (const auto& v : a["coefficients"]) coefs.push_back(to_vector(v));
      if (source == "fitted") {
        c.adherence_source = AdherenceSource::fitted();
      } else if (source == "external") {
        std::vector<Eigen::MatrixXd> cov;
        if (a.contains("covariance"))
          for (const auto& m : a["covariance"]) cov.push_back(to_matrix(m));
        c.adherence_source = AdherenceSource::external(std::move(coefs), std::move(cov));
      } else if (source == "sensitivity") {
        c.adherence_source = AdherenceSource::sensitivity(std::move(coefs));
      } else {
        throw SpecError("config: unknown adherence source '" + source + "'");
      }
    }

    if (root.contains("inference")) {
      const json& inf = root["inference"];
      check_keys(inf, {"method", "replicates", "level"}, "config: inference");
      const auto method = inf.contains("method") ? inf["method"].get<std::string>() : std::string("sandwich");
      if (method == "sandwich")
        c.inference = Inference::Sandwich;
      else if (method == "bootstrap")
        c.inference = Inference::Bootstrap;
      else if (method == "none")
        c.inference = Inference::None;
      else
        throw SpecError("config: unknown inference method '" + method + "'");
      if (inf.contains("replicates")) c.replicates = inf["replicates"].get<int>();
      if (inf.contains("level")) c.level = inf["level"].get<double>();
      if (!(c.level > 0.0 && c.level < 1.0)) throw SpecError("config: inference level must lie in (0, 1)");
    }
    if (root.contains("exact_pseudo_outcomes")) c.exact_pseudo_outcomes = root["exact_pseudo_outcomes"].get<bool>();
    if (root.contains("seed")) c.seed = root["seed"].get<std::uint64_t>();
    if (root.contains("jobs")) c.jobs = root["jobs"].get<int>();
    if (root.contains("output")) {
      fs::path o = root["output"].get<std::string>();
      if (o.is_relative() && !base.empty()) o = base / o;
      c.output = o;
    }
    return c;
  } catch (const json::exception& e) {
    throw SpecError(std::string("config: ") + e.what());
  }
}

AnalysisConfig load_analysis_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw SpecError("cannot open config '" + path.string() + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_analysis_config(buffer.str(), path.parent_path());
}

std::vector<StageModelSpec> model_specs(const AnalysisConfig& c) {
  std::vector<StageModelSpec> specs;
  for (int j = 0; j < c.stages; ++j) {
    const auto s = static_cast<std::size_t>(j);
    try {
      specs.push_back(make_stage_spec(c.contrast[s], c.treatment_free[s], c.assignment[s], c.adherence[s]));
    } catch (const SpecError& e) {
      throw SpecError("stage " + std::to_string(j + 1) + " models: " + e.what());
    }
  }
  return specs;
}

LoadedData load_dataset(const AnalysisConfig& c, const CsvTable& table) {
  const auto K = static_cast<std::size_t>(c.stages);
  const bool need_actual = c.mode == EstimationMode::StandardActual;

  std::set<std::string> names;
  for (const auto& sc : c.columns)
    for (const auto& [name, column] : sc.covariates) names.insert(name);
  const std::vector<std::string> covariate_names(names.begin(), names.end());

  struct Bound {
    std::vector<std::optional<std::size_t>> covariates;  // by covariate_names index
    std::size_t proxy;
    std::optional<std::size_t> actual, validation;
  };
  std::vector<Bound> bound(K);
  for (std::size_t j = 0; j < K; ++j) {
    const auto& sc = c.columns[j];
    bound[j].covariates.resize(covariate_names.size());
    for (std::size_t v = 0; v < covariate_names.size(); ++v) {
      const auto it = sc.covariates.find(covariate_names[v]);
      if (it != sc.covariates.end()) bound[j].covariates[v] = table.column(it->second);
    }
    bound[j].proxy = table.column(sc.proxy);
    if (sc.actual) bound[j].actual = table.column(*sc.actual);
    if (sc.validation) bound[j].validation = table.column(*sc.validation);
    if (need_actual && !sc.actual)
      throw SpecError("stage " + std::to_string(j + 1) + ": standard-actual needs an 'actual' column");
  }
  const std::size_t outcome_col = table.column(c.outcome);
  const std::optional<std::size_t> id_col =
      c.id_column ? std::optional<std::size_t>(table.column(*c.id_column)) : std::nullopt;

  const auto number = [&](std::size_t row, std::size_t col) {
    try {
      return parse_number(table.rows[row][col]);
    } catch (const DataError& e) {
      throw DataError(cell_where(row, table.header[col]) + ": " + e.what());
    }
  };
  const auto binary = [&](std::size_t row, std::size_t col) -> std::optional<double> {
    const auto v = number(row, col);
    if (v && *v != 0.0 && *v != 1.0)
      throw DataError(cell_where(row, table.header[col]) + ": treatment indicator must be 0 or 1");
    return v;
  };

  struct Row {
    std::vector<std::vector<double>> covariates;  // [stage][covariate]
    std::vector<double> proxy, actual;
    std::vector<std::uint8_t> validated;
    double outcome;
    std::string id;
  };
  std::vector<Row> rows;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    Row row;
    bool complete = true;
    const auto y = number(r, outcome_col);
    complete = complete && y.has_value();
    row.outcome = y.value_or(nan);
    row.id = id_col ? table.rows[r][*id_col] : std::to_string(r + 1);
    for (std::size_t j = 0; j < K; ++j) {
      const auto& b = bound[j];
      std::vector<double> covs(covariate_names.size(), nan);
      for (std::size_t v = 0; v < covariate_names.size(); ++v) {
        if (!b.covariates[v]) continue;
        const auto x = number(r, *b.covariates[v]);
        complete = complete && x.has_value();
        covs[v] = x.value_or(nan);
      }
      row.covariates.push_back(std::move(covs));
      const auto proxy = binary(r, b.proxy);
      complete = complete && proxy.has_value();
      row.proxy.push_back(proxy.value_or(nan));
      const auto actual = b.actual ? binary(r, *b.actual) : std::nullopt;
      row.actual.push_back(actual.value_or(nan));
      bool validated = actual.has_value();
      if (b.validation) {
        const auto flag = binary(r, *b.validation);
        validated = flag.value_or(0.0) == 1.0;
      }
      if (validated && !actual) complete = false;
      if (need_actual && !actual) complete = false;
      row.validated.push_back(validated ? 1 : 0);
    }
    if (complete) rows.push_back(std::move(row));
  }
  if (rows.empty()) throw DataError("no complete rows after filtering");

  const auto n = static_cast<Eigen::Index>(rows.size());
  Dataset::Columns cols;
  cols.stages = c.stages;
  cols.covariate_names = covariate_names;
  cols.outcome.resize(n);
  for (std::size_t j = 0; j < K; ++j) {
    std::vector<Eigen::VectorXd> covs(covariate_names.size(), Eigen::VectorXd(n));
    Eigen::VectorXd proxy(n), actual(n);
    std::vector<std::uint8_t> validation(rows.size());
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& row = rows[static_cast<std::size_t>(i)];
      for (std::size_t v = 0; v < covariate_names.size(); ++v) covs[v](i) = row.covariates[j][v];
      proxy(i) = row.proxy[j];
      actual(i) = row.actual[j];
      validation[static_cast<std::size_t>(i)] = row.validated[j];
    }
    cols.covariates.push_back(std::move(covs));
    if (c.proxy == ProxyKind::Prescribed) {
      cols.prescribed.push_back(proxy);
      cols.reported.emplace_back();
    } else {
      cols.reported.push_back(proxy);
      cols.prescribed.emplace_back();
    }
    cols.actual.push_back(c.columns[j].actual ? actual : Eigen::VectorXd());
    cols.validation.push_back(std::move(validation));
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    cols.outcome(i) = rows[static_cast<std::size_t>(i)].outcome;
    cols.ids.push_back(rows[static_cast<std::size_t>(i)].id);
  }

  // Covariates referenced by a model must be bound at the referenced stage.
  const auto check = [&](const FeatureSpec& spec) {
    for (const auto& term : spec.terms)
      for (const auto& f : term.factors) {
        if (f.kind != Factor::Kind::Covariate || f.stage < 1 || f.stage > c.stages) continue;
        if (!c.columns[static_cast<std::size_t>(f.stage - 1)].covariates.contains(f.name))
          throw SpecError("covariate '" + f.name + "' is not bound at stage " + std::to_string(f.stage));
      }
  };
  for (const auto& spec : model_specs(c)) {
    check(spec.contrast);
    check(spec.treatment_free);
    check(spec.assignment);
    check(spec.adherence);
  }

  return {Dataset(std::move(cols), c.proxy), table.rows.size(), table.rows.size() - rows.size()};
}

std::vector<std::vector<Eigen::VectorXd>> parse_grid(const CsvTable& table, const std::vector<StageModelSpec>& specs) {
  // (stage index, term index) for each grid column.
  std::vector<std::pair<std::size_t, std::size_t>> slots;
  std::vector<std::vector<bool>> seen;
  for (const auto& s : specs) seen.emplace_back(s.adherence.size(), false);
  for (const auto& cell : table.header) {
    const auto colon = cell.find(':');
    if (cell.size() < 3 || cell[0] != 's' || colon == std::string::npos)
      throw SpecError("grid header '" + cell + "': expected s<stage>:<term>");
    int stage = 0;
    const auto [end, ec] = std::from_chars(cell.data() + 1, cell.data() + colon, stage);
    if (ec != std::errc{} || end != cell.data() + colon || stage < 1 || stage > static_cast<int>(specs.size()))
      throw SpecError("grid header '" + cell + "': stage out of range");
    const FeatureSpec parsed = parse_feature_spec(cell.substr(colon + 1));
    if (parsed.size() != 1) throw SpecError("grid header '" + cell + "': expected a single term");
    const auto& terms = specs[static_cast<std::size_t>(stage - 1)].adherence.terms;
    std::size_t t = 0;
    while (t < terms.size() && !(terms[t] == parsed.terms[0])) ++t;
    if (t == terms.size())
      throw SpecError("grid header '" + cell + "': not a term of the stage " + std::to_string(stage) +
                      " adherence model");
    auto flag = seen[static_cast<std::size_t>(stage - 1)][t];
    if (flag) throw SpecError("grid header '" + cell + "': duplicate term");
    flag = true;
    slots.emplace_back(static_cast<std::size_t>(stage - 1), t);
  }
  for (std::size_t j = 0; j < specs.size(); ++j)
    for (std::size_t t = 0; t < seen[j].size(); ++t)
      if (!seen[j][t])
        throw SpecError("grid lacks a column for s" + std::to_string(j + 1) + ":" +
                        to_string(specs[j].adherence.terms[t]));
  if (table.rows.empty()) throw SpecError("grid has no rows");

  std::vector<std::vector<Eigen::VectorXd>> grid;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    std::vector<Eigen::VectorXd> point;
    for (const auto& s : specs) point.push_back(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(s.adherence.size())));
    for (std::size_t col = 0; col < slots.size(); ++col) {
      std::optional<double> v;
      try {
        v = parse_number(table.rows[r][col]);
      } catch (const DataError& e) {
        throw SpecError("grid " + cell_where(r, table.header[col]) + ": " + e.what());
      }
      if (!v) throw SpecError("grid " + cell_where(r, table.header[col]) + ": empty cell");
      point[slots[col].first](static_cast<Eigen::Index>(slots[col].second)) = *v;
    }
    grid.push_back(std::move(point));
  }
  return grid;
}

double recommendation_agreement(const Dataset& data, const RegimeFit& a, const RegimeFit& b) {
  std::size_t same = 0, total = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Trajectory t = data.trajectory(i);
    for (int j = 1; j <= data.stages(); ++j) {
      same += recommend(a, t, j) == recommend(b, t, j) ? 1 : 0;
      ++total;
    }
  }
  return total ? static_cast<double>(same) / static_cast<double>(total) : 1.0;
}

// ---- entry point -----------------------------------------------------------

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Optimal dynamic treatment regimes under nonadherence"};
  app.require_subcommand(1);

  SimulateArgs sim;
  auto* simulate_cmd = app.add_subcommand("simulate", "Run a simulation study");
  simulate_cmd->add_option("--scenario", sim.scenario, "s1, s2, s3 or s4")->required();
  simulate_cmd->add_option("--n", sim.n, "Sample size");
  simulate_cmd->add_option("--reps", sim.reps, "Replications");
  simulate_cmd->add_option("--validation", sim.validation, "Validation fraction");
  simulate_cmd->add_option("--param", sim.param, "Varied contrast coefficient (s1, s4)");
  simulate_cmd->add_option("--estimators", sim.estimators, "Comma-separated estimator list");
  simulate_cmd->add_option("--seed", sim.seed, "Master seed (default: DTR_ADHERE_SEED or 1)");
  simulate_cmd->add_option("--out", sim.out, "Output directory")->required();
  simulate_cmd->add_flag("--coverage", sim.coverage, "Compute Wald sandwich coverage");
  simulate_cmd->add_flag("--exact-pseudo-outcomes", sim.exact, "Use exact pseudo outcomes");
  simulate_cmd->add_option("--level", sim.level, "Interval level");
  simulate_cmd->add_option("--s3-treatment-free", sim.s3_indicator, "actual or prescribed");
  simulate_cmd->add_option("--jobs", sim.jobs, "Worker threads");

  SimulateArgs gen;
  auto* generate_cmd = app.add_subcommand("generate", "Write one simulated dataset as CSV");
  generate_cmd->add_option("--scenario", gen.scenario, "s1, s2, s3 or s4")->required();
  generate_cmd->add_option("--n", gen.n, "Sample size");
  generate_cmd->add_option("--validation", gen.validation, "Validation fraction");
  generate_cmd->add_option("--param", gen.param, "Varied contrast coefficient (s1, s4)");
  generate_cmd->add_option("--seed", gen.seed, "Master seed (default: DTR_ADHERE_SEED or 1)");
  generate_cmd->add_option("--s3-treatment-free", gen.s3_indicator, "actual or prescribed");
  generate_cmd->add_option("--out", gen.out, "Output CSV file")->required();

  AnalyzeArgs an;
  auto* analyze_cmd = app.add_subcommand("analyze", "Fit a regime to a CSV dataset");
  analyze_cmd->add_option("config", an.config, "Analysis config (JSON)")->required();
  analyze_cmd->add_option("--out", an.out, "Output directory");
  analyze_cmd->add_option("--seed", an.seed, "Bootstrap seed");
  analyze_cmd->add_option("--jobs", an.jobs, "Worker threads");

  AnalyzeArgs sens;
  auto* sensitivity_cmd = app.add_subcommand("sensitivity", "Sweep fixed adherence coefficients");
  sensitivity_cmd->add_option("config", sens.config, "Analysis config (JSON)")->required();
  sensitivity_cmd->add_option("grid", sens.grid, "Grid CSV")->required();
  sensitivity_cmd->add_option("--out", sens.out, "Output directory");
  sensitivity_cmd->add_option("--seed", sens.seed, "Unused; accepted for symmetry");
  sensitivity_cmd->add_option("--jobs", sens.jobs, "Worker threads");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*simulate_cmd) return simulate(sim, out);
    if (*generate_cmd) return generate_data(gen, out);
    if (*analyze_cmd) return analyze(an, out);
    return sensitivity(sens, out, err);
  } catch (const EstimationError& e) {
    err << "error: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace dtr::cli
