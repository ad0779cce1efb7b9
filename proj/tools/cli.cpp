#include "cli.hpp"

#include <boost/version.hpp>
#include <CLI11.hpp>
#include <Eigen/Core>

#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>

#include "teamprod/additive_fe.hpp"
#include "teamprod/allocation.hpp"
#include "teamprod/error.hpp"
#include "teamprod/hypergraph.hpp"
#include "teamprod/mixture_ve.hpp"
#include "teamprod/report.hpp"
#include "teamprod/simulate.hpp"

namespace teamprod::cli {

namespace {

constexpr const char* kVersion = "1.0.0";

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

std::string strip_comment(const std::string& line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    else if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

Config Config::parse(const std::string& text) {
  Config c;
  std::istringstream is(text);
  std::string raw;
  int lineno = 0;
  while (std::getline(is, raw)) {
    ++lineno;
    const std::string line = trim(strip_comment(raw));
    if (line.empty()) continue;
    const auto where = "config line " + std::to_string(lineno) + ": ";
    if (line.front() == '[') throw ConfigError(where + "tables are not supported; use flat keys");
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    const std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(where + "empty key");
    for (char ch : key)
      if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '-'))
        throw ConfigError(where + "bad key '" + key + "'");
    if (value.empty()) throw ConfigError(where + "empty value for '" + key + "'");
    if (value.front() == '"') {
      if (value.size() < 2 || value.back() != '"') throw ConfigError(where + "unterminated string");
      value = value.substr(1, value.size() - 2);
    } else if (value.front() == '[') {
      if (value.back() != ']') throw ConfigError(where + "unterminated array");
      std::string inner = value.substr(1, value.size() - 2), joined;
      std::istringstream parts(inner);
      std::string part;
      while (std::getline(parts, part, ',')) {
        part = trim(part);
        if (part.empty()) throw ConfigError(where + "empty array element");
        joined += (joined.empty() ? "" : ",") + part;
      }
      value = joined;
    }
    if (c.values_.count(key)) throw ConfigError(where + "key '" + key + "' repeated");
    c.values_[key] = value;
  }
  return c;
}

Config Config::load(const std::string& path) { return parse(read_file(path)); }

std::string Config::str(const std::string& key, const std::string& fallback) const {
  const auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

long Config::integer(const std::string& key, long fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    std::size_t used = 0;
    const long v = std::stol(it->second, &used);
    if (used == it->second.size()) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError("config key '" + key + "' must be an integer, got '" + it->second + "'");
}

double Config::number(const std::string& key, double fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    std::size_t used = 0;
    const double v = std::stod(it->second, &used);
    if (used == it->second.size()) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError("config key '" + key + "' must be a number, got '" + it->second + "'");
}

bool Config::boolean(const std::string& key, bool fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  if (it->second == "true") return true;
  if (it->second == "false") return false;
  throw ConfigError("config key '" + key + "' must be true or false");
}

std::vector<long> Config::integers(const std::string& key, const std::vector<long>& fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  std::vector<long> out;
  std::istringstream parts(it->second);
  std::string part;
  while (std::getline(parts, part, ',')) {
    Config one;
    one.values_[key] = trim(part);
    out.push_back(one.integer(key, 0));
  }
  return out;
}

void Config::check_keys(const std::vector<std::string>& known) const {
  for (const auto& [k, v] : values_)
    if (std::find(known.begin(), known.end(), k) == known.end()) throw ConfigError("unknown config key '" + k + "'");
}

std::string Config::canonical() const {
  std::string s;
  for (const auto& [k, v] : values_) s += k + "=" + v + "\n";
  return s;
}

std::uint64_t Config::hash() const { return fnv1a64(canonical()); }

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t task) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (task + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

namespace {

nlohmann::json versions() {
  return {{"teamprod", kVersion},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION)},
          {"boost", BOOST_LIB_VERSION},
          {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
          {"cli11", CLI11_VERSION},
          {"compiler", __VERSION__}};
}

nlohmann::json meta(const std::string& command, const Config& cfg, std::uint64_t seed) {
  return {{"command", command},
          {"seed", seed},
          {"config", cfg.values()},
          {"config_hash", hex64(cfg.hash())},
          {"versions", versions()}};
}

std::string resolve_out_dir(const std::string& flag, const Config& cfg) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("TEAMPROD_OUT_DIR"); env && *env) return env;
  return cfg.str("out_dir", "teamprod_out");
}

YearEffectFamily year_family(const std::string& s) {
  if (s == "multiplicative") return YearEffectFamily::multiplicative;
  if (s == "poisson_with_age") return YearEffectFamily::poisson_with_age;
  throw ConfigError("net_years must be none, multiplicative or poisson_with_age, got '" + s + "'");
}

struct Prepared {
  Hypergraph h;
  nlohmann::json info;
};

// Load, optional year netting, minimum-productions filter.
Prepared prepare(const std::string& input, int n_max, int min_productions, bool iterate, const std::string& net_years,
                 std::optional<int> reference_year) {
  if (input.empty()) throw ConfigError("an input file is required");
  if (!std::filesystem::exists(input)) throw ConfigError("input file '" + input + "' not found");
  LoadOptions lo;
  lo.n_max = n_max;
  const auto loaded = load_teams(input, lo);
  Prepared p;
  p.h = loaded.graph;
  p.info["rows_read"] = loaded.rows_read;
  p.info["dropped_oversize"] = loaded.dropped_oversize;
  if (net_years != "none") {
    if (!reference_year) throw ConfigError("net_years needs reference_year");
    const auto r = net_year_effects(p.h, *reference_year, year_family(net_years));
    p.h = r.graph;
    nlohmann::json y;
    for (const auto& [yr, e] : r.effects.year) y[std::to_string(yr)] = e;
    p.info["year_effects"] = y;
    if (!r.effects.age.empty()) {
      nlohmann::json a;
      for (const auto& [age, e] : r.effects.age) a[std::to_string(age)] = e;
      p.info["age_effects"] = a;
    }
  }
  if (min_productions > 1) p.h = filter_min_productions(p.h, min_productions, iterate);
  p.info["workers"] = p.h.n_workers();
  p.info["teams"] = p.h.n_teams();
  return p;
}

void write_text(const std::string& path, const std::string& text) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out << text;
}

// Fit outputs for one K: report, model, posteriors, matrices and optionally the allocation.
void add_mixture(ReportBundle& b, const MixtureFit& f, const Hypergraph& h, bool allocate, std::ostream& out) {
  const int K = f.model.K;
  const auto k = std::to_string(K);
  b.mixtures[K] = mixture_report(f, h);
  b.documents["model_K" + k + ".json"] = to_json(f.model);
  b.texts["posteriors_K" + k + ".csv"] = posteriors_csv(f.state, h);
  b.matrices["sorting_K" + k] = posterior_type_matrix(f.model, f.state, h);
  b.matrices["mean_output_K" + k] = mean_output_matrix(f.model, f.state, h).value;
  out << "mixture K=" << K << ": ELBO " << format_number(f.state.elbo_trace.back()) << ", "
      << f.state.iterations << " iterations, best restart " << f.state.best_restart << "\n";
  if (!allocate) return;
  const auto problem = budgets_from_fit(f.model, f.state, h);
  const auto sol = solve_allocation(problem);
  b.documents["allocation_K" + k + ".json"] = {{"problem", to_json(problem)}, {"solution", to_json(sol)}};
  try {
    b.matrices["allocation_K" + k] = allocation_matrix(sol);
  } catch (const DataError&) {
    out << "allocation K=" << K << ": no pair teams allocated\n";
  }
}

void add_proxies(ReportBundle& b, const Hypergraph& h, int bins, int threshold) {
  const auto p = type_proxies(h, bins, threshold);
  b.matrices["proxy_sorting"] = p.sorting;
  b.matrices["proxy_mean_output"] = p.mean_output;
}

MixtureOptions mixture_options(const Config& c, std::uint64_t seed, int threads) {
  MixtureOptions o;
  o.family = family_from_string(c.str("family", "lognormal"));
  o.variant = variant_from_string(c.str("variant", "independent"));
  o.restarts = static_cast<int>(c.integer("restarts", o.restarts));
  o.tol = c.number("tol", o.tol);
  o.max_iter = static_cast<int>(c.integer("max_iter", o.max_iter));
  o.parallel_estep = c.boolean("parallel_estep", o.parallel_estep);
  o.weight_floor = c.number("weight_floor", o.weight_floor);
  o.variance_floor = c.number("variance_floor", o.variance_floor);
  o.proxy_threshold = static_cast<int>(c.integer("proxy_threshold", o.proxy_threshold));
  o.logit_ridge = c.number("logit_ridge", o.logit_ridge);
  o.seed = seed;
  o.threads = threads;
  if (o.restarts < 1) throw ConfigError("restarts must be >= 1");
  if (!(o.tol > 0.0)) throw ConfigError("tol must be > 0");
  return o;
}

AdditiveOptions additive_options(const Config& c, std::uint64_t seed, int threads) {
  AdditiveOptions o;
  o.spec = output_spec_from_string(c.str("spec", "levels"));
  o.identification.tol = c.number("identification_tol", o.identification.tol);
  o.bias.draws = static_cast<int>(c.integer("hutchinson_draws", o.bias.draws));
  o.bias.exact_max_teams = static_cast<std::size_t>(c.integer("exact_max_teams", static_cast<long>(o.bias.exact_max_teams)));
  o.bias.seed = seed;
  o.bias.threads = threads;
  if (o.bias.draws < 1) throw ConfigError("hutchinson_draws must be >= 1");
  return o;
}

const std::vector<std::string> kPipelineKeys = {
    "input",          "simulate_design",  "simulate_replication", "simulate_seed", "n_max",
    "min_productions", "min_productions_iterate", "net_years", "reference_year", "additive",
    "spec",           "identification_tol", "hutchinson_draws", "exact_max_teams", "mixture_k",
    "family",         "variant",          "restarts",           "tol",           "max_iter",
    "parallel_estep", "weight_floor",     "variance_floor",     "proxy_bins",    "proxy_threshold",
    "logit_ridge",    "allocate",         "seed",               "threads",       "out_dir"};

struct Common {
  std::string out_dir;
  int threads = 1;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--out-dir", c.out_dir, "Output directory (default: $TEAMPROD_OUT_DIR, then teamprod_out)");
  app->add_option("--threads", c.threads, "Worker threads")->check(CLI::PositiveNumber);
}

std::optional<int> opt_year(const Config& c) {
  if (!c.has("reference_year")) return std::nullopt;
  return static_cast<int>(c.integer("reference_year", 0));
}

int pipeline(const Config& cfg, const Common& common, std::ostream& out) {
  cfg.check_keys(kPipelineKeys);
  const auto seed = static_cast<std::uint64_t>(cfg.integer("seed", 1));
  const int threads = common.threads > 1 ? common.threads : static_cast<int>(cfg.integer("threads", 1));
  const std::string dir = resolve_out_dir(common.out_dir, cfg);
  ReportBundle b;
  b.meta = meta("pipeline", cfg, seed);

  Prepared p;
  if (cfg.has("simulate_design")) {
    if (cfg.has("input")) throw ConfigError("set either input or simulate_design, not both");
    auto d = builtin_design(cfg.str("simulate_design", ""));
    d.seed = static_cast<std::uint64_t>(cfg.integer("simulate_seed", static_cast<long>(seed)));
    const auto draw = simulate(d, static_cast<int>(cfg.integer("simulate_replication", 0)));
    const auto tmp = std::filesystem::path(dir) / "simulated_teams.csv";
    write_text(tmp.string(), to_csv(draw.h));
    p = prepare(tmp.string(), static_cast<int>(cfg.integer("n_max", 3)), static_cast<int>(cfg.integer("min_productions", 1)),
                cfg.boolean("min_productions_iterate", true), "none", std::nullopt);
  } else {
    p = prepare(cfg.str("input", ""), static_cast<int>(cfg.integer("n_max", 3)),
                static_cast<int>(cfg.integer("min_productions", 1)), cfg.boolean("min_productions_iterate", true),
                cfg.str("net_years", "none"), opt_year(cfg));
  }
  b.documents["ingest.json"] = p.info;
  b.descriptives = descriptive_stats(p.h);
  out << "data: " << p.h.n_workers() << " workers, " << p.h.n_teams() << " teams\n";

  if (cfg.boolean("additive", true)) {
    const auto r = fit_additive(p.h, additive_options(cfg, derive_seed(seed, 1), threads));
    b.additive = additive_report(r);
    out << "additive: " << r.fit.design.cols() << " identified workers, " << r.fit.design.rows() << " teams\n";
  }

  const auto ks = cfg.integers("mixture_k", {4});
  if (!ks.empty()) {
    Hypergraph h2 = restrict_sizes(p.h, 2);
    if (cfg.integer("min_productions", 1) > 1)
      h2 = filter_min_productions(h2, static_cast<int>(cfg.integer("min_productions", 1)),
                                  cfg.boolean("min_productions_iterate", true));
    b.documents["subsample.json"] = {{"workers", h2.n_workers()}, {"teams", h2.n_teams()}};
    add_proxies(b, h2, static_cast<int>(cfg.integer("proxy_bins", 4)), static_cast<int>(cfg.integer("proxy_threshold", 5)));
    for (long K : ks) {
      if (K < 1) throw ConfigError("mixture_k entries must be >= 1");
      auto o = mixture_options(cfg, derive_seed(seed, 100 + static_cast<std::uint64_t>(K)), threads);
      o.K = static_cast<int>(K);
      const auto f = fit_mixture(h2, o);
      add_mixture(b, f, h2, cfg.boolean("allocate", true), out);
    }
  }
  const auto files = emit_bundle(b, dir);
  out << "wrote " << files.size() << " files to " << dir << "\n";
  return 0;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Team production: additive and mixture estimators, allocation, simulation"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  Common common;
  std::uint64_t seed = 1;

  // ingest
  auto* ingest = app.add_subcommand("ingest", "Load, clean and describe a team file");
  std::string in_input, net_years = "none";
  int min_prod = 1, n_max = 3;
  std::optional<int> ref_year;
  bool one_pass = false;
  ingest->add_option("--input", in_input, "Team CSV (team_id,worker_ids,output[,year])")->required();
  ingest->add_option("--min-productions", min_prod, "Drop workers with fewer teams (iterated)");
  ingest->add_option("--n-max", n_max, "Largest team size kept (0 keeps all)");
  ingest->add_option("--net-years", net_years, "none | multiplicative | poisson_with_age");
  ingest->add_option("--reference-year", ref_year, "Reference year for netting");
  ingest->add_flag("--one-pass", one_pass, "Single pass of the minimum-productions filter");
  add_common(ingest, common);

  // fit-additive
  auto* fa = app.add_subcommand("fit-additive", "Additive model: lambda, effects, bias-corrected variance components");
  std::string fa_input, fa_spec = "levels";
  int fa_min = 1, fa_nmax = 3, fa_draws = 1000;
  long fa_exact = 2000;
  fa->add_option("--input", fa_input, "Team CSV")->required();
  fa->add_option("--spec", fa_spec, "levels | logs | ranks");
  fa->add_option("--min-productions", fa_min, "Minimum teams per worker");
  fa->add_option("--n-max", fa_nmax, "Largest team size kept");
  fa->add_option("--hutchinson-draws", fa_draws, "Probes for the trace estimate");
  fa->add_option("--exact-max-teams", fa_exact, "Exact bias trace up to this many teams");
  fa->add_option("--seed", seed, "Seed");
  add_common(fa, common);

  // fit-mixture
  auto* fm = app.add_subcommand("fit-mixture", "Finite-mixture model by variational EM");
  std::string fm_input, fm_family = "lognormal", fm_variant = "independent";
  int fm_k = 2, fm_restarts = 10, fm_min = 1, fm_maxit = 2000, fm_bins = 4, fm_thr = 5;
  double fm_tol = 1e-3;
  bool fm_parallel = false, fm_alloc = false;
  fm->add_option("--input", fm_input, "Team CSV (teams above two workers are dropped)")->required();
  fm->add_option("--k", fm_k, "Number of types")->check(CLI::PositiveNumber);
  fm->add_option("--family", fm_family, "lognormal | negbin");
  fm->add_option("--variant", fm_variant, "independent | correlated | joint");
  fm->add_option("--restarts", fm_restarts, "Starting points");
  fm->add_option("--tol", fm_tol, "ELBO convergence tolerance");
  fm->add_option("--max-iter", fm_maxit, "Iteration cap");
  fm->add_option("--min-productions", fm_min, "Minimum teams per worker");
  fm->add_option("--proxy-bins", fm_bins, "Bins for the type-proxy matrices");
  fm->add_option("--proxy-threshold", fm_thr, "Solo teams needed for a type proxy");
  fm->add_flag("--parallel-estep", fm_parallel, "Jacobi E-step over threads");
  fm->add_flag("--allocate", fm_alloc, "Also solve the max-surplus allocation");
  fm->add_option("--seed", seed, "Seed");
  add_common(fm, common);

  // allocate
  auto* al = app.add_subcommand("allocate", "Max-surplus allocation from a fitted model");
  std::string al_model, al_q, al_input;
  int al_min = 1;
  al->add_option("--model", al_model, "model_K*.json from fit-mixture")->required();
  al->add_option("--posteriors", al_q, "posteriors_K*.csv from fit-mixture")->required();
  al->add_option("--input", al_input, "Team CSV the model was fitted on (budgets)")->required();
  al->add_option("--min-productions", al_min, "Same filter as the fit");
  add_common(al, common);

  // simulate
  auto* sm = app.add_subcommand("simulate", "Monte Carlo over a built-in design");
  std::string sm_design = "panelA2", sm_out, sm_est = "auto", sm_data;
  int sm_reps = 100, sm_restarts = 10;
  double sm_tol = 1e-3;
  sm->add_option("--design", sm_design, "panelA2 | panelB4 | additive-types | additive (suffix -small for the smaller network)");
  sm->add_option("--reps", sm_reps, "Replications")->check(CLI::PositiveNumber);
  sm->add_option("--seed", seed, "Seed");
  sm->add_option("--out", sm_out, "Report CSV path");
  sm->add_option("--estimator", sm_est, "auto | mixture | nonlinear | identity | additive");
  sm->add_option("--restarts", sm_restarts, "Restarts per mixture fit");
  sm->add_option("--tol", sm_tol, "ELBO tolerance per mixture fit");
  sm->add_option("--data-out", sm_data, "Also write replication 0 as a team CSV");
  add_common(sm, common);

  // report
  auto* rp = app.add_subcommand("report", "Descriptive tables plus previously written fit documents");
  std::string rp_input;
  std::vector<std::string> rp_docs;
  rp->add_option("--input", rp_input, "Team CSV")->required();
  rp->add_option("--include", rp_docs, "additive.json / mixture_K*.json files to carry into the bundle");
  add_common(rp, common);

  // pipeline
  auto* pl = app.add_subcommand("pipeline", "Full analysis from one config file");
  std::string pl_config;
  pl->add_option("--config", pl_config, "Flat key = value config")->required();
  add_common(pl, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    if (argc <= 1) err << app.help();
    return 2;
  }

  try {
    if (*ingest) {
      Config c;
      c.set("input", in_input);
      c.set("min_productions", std::to_string(min_prod));
      c.set("n_max", std::to_string(n_max));
      c.set("net_years", net_years);
      if (ref_year) c.set("reference_year", std::to_string(*ref_year));
      c.set("min_productions_iterate", one_pass ? "false" : "true");
      const auto p = prepare(in_input, n_max, min_prod, !one_pass, net_years, ref_year);
      ReportBundle b;
      b.meta = meta("ingest", c, 0);
      b.descriptives = descriptive_stats(p.h);
      b.documents["ingest.json"] = p.info;
      b.texts["teams_clean.csv"] = to_csv(p.h);
      const auto dir = resolve_out_dir(common.out_dir, c);
      emit_bundle(b, dir);
      out << "ingest: " << p.h.n_workers() << " workers, " << p.h.n_teams() << " teams -> " << dir << "\n";
    } else if (*fa) {
      Config c;
      c.set("input", fa_input);
      c.set("spec", fa_spec);
      c.set("min_productions", std::to_string(fa_min));
      c.set("n_max", std::to_string(fa_nmax));
      c.set("hutchinson_draws", std::to_string(fa_draws));
      c.set("exact_max_teams", std::to_string(fa_exact));
      c.set("seed", std::to_string(seed));
      const auto p = prepare(fa_input, fa_nmax, fa_min, true, "none", std::nullopt);
      const auto r = fit_additive(p.h, additive_options(c, seed, common.threads));
      ReportBundle b;
      b.meta = meta("fit-additive", c, seed);
      b.additive = additive_report(r);
      const auto dir = resolve_out_dir(common.out_dir, c);
      emit_bundle(b, dir);
      out << "fit-additive: " << r.fit.design.cols() << " identified workers -> " << dir << "/additive.json\n";
    } else if (*fm) {
      Config c;
      c.set("input", fm_input);
      c.set("mixture_k", std::to_string(fm_k));
      c.set("family", fm_family);
      c.set("variant", fm_variant);
      c.set("restarts", std::to_string(fm_restarts));
      c.set("tol", format_number(fm_tol));
      c.set("max_iter", std::to_string(fm_maxit));
      c.set("min_productions", std::to_string(fm_min));
      c.set("parallel_estep", fm_parallel ? "true" : "false");
      c.set("seed", std::to_string(seed));
      auto o = mixture_options(c, seed, common.threads);
      o.K = fm_k;
      o.tol = fm_tol;
      o.proxy_threshold = fm_thr;
      const auto p = prepare(fm_input, 2, fm_min, true, "none", std::nullopt);
      const auto f = fit_mixture(p.h, o);
      ReportBundle b;
      b.meta = meta("fit-mixture", c, seed);
      add_mixture(b, f, p.h, fm_alloc, out);
      add_proxies(b, p.h, fm_bins, fm_thr);
      const auto dir = resolve_out_dir(common.out_dir, c);
      emit_bundle(b, dir);
      out << "fit-mixture -> " << dir << "\n";
    } else if (*al) {
      Config c;
      c.set("model", al_model);
      c.set("posteriors", al_q);
      c.set("input", al_input);
      c.set("min_productions", std::to_string(al_min));
      MixtureModel m;
      try {
        m = mixture_model_from_json(nlohmann::json::parse(read_file(al_model)));
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError("cannot parse model '" + al_model + "': " + e.what());
      }
      const auto p = prepare(al_input, 2, al_min, true, "none", std::nullopt);
      VariationalState s;
      s.q = read_posteriors(read_file(al_q), p.h);
      if (s.q.cols() != m.K) throw DataError("posteriors have " + std::to_string(s.q.cols()) + " types, model has " + std::to_string(m.K));
      const auto problem = budgets_from_fit(m, s, p.h);
      const auto sol = solve_allocation(problem);
      ReportBundle b;
      b.meta = meta("allocate", c, 0);
      const auto k = std::to_string(m.K);
      b.documents["allocation_K" + k + ".json"] = {{"problem", to_json(problem)}, {"solution", to_json(sol)}};
      b.matrices["allocation_K" + k] = allocation_matrix(sol);
      const auto dir = resolve_out_dir(common.out_dir, c);
      emit_bundle(b, dir);
      out << "allocate: objective " << format_number(sol.objective) << " (LP bound " << format_number(sol.lp_bound)
          << ") -> " << dir << "\n";
    } else if (*sm) {
      Config c;
      c.set("design", sm_design);
      c.set("reps", std::to_string(sm_reps));
      c.set("seed", std::to_string(seed));
      c.set("estimator", sm_est);
      c.set("restarts", std::to_string(sm_restarts));
      c.set("tol", format_number(sm_tol));
      auto d = builtin_design(sm_design);
      d.replications = sm_reps;
      d.seed = seed;
      std::string est = sm_est;
      if (est == "auto") est = d.generator == Generator::additive ? "additive" : "mixture";
      Estimator e;
      MixtureOptions o;
      o.K = d.mixture.K;
      o.family = d.mixture.family;
      o.restarts = sm_restarts;
      o.tol = sm_tol;
      if (est == "mixture") e = mixture_estimator(d, o);
      else if (est == "nonlinear") e = nonlinear_estimator(d, o);
      else if (est == "identity") e = identity_estimator(d);
      else if (est == "additive") {
        AdditiveOptions ao;
        ao.bias.draws = 100;
        e = additive_estimator(d, ao);
      } else throw ConfigError("unknown estimator '" + est + "'");
      if (!sm_data.empty()) write_text(sm_data, to_csv(simulate(d, 0).h));
      const auto r = run_monte_carlo(d, e, common.threads);
      const auto csv = to_csv(r);
      ReportBundle b;
      b.meta = meta("simulate", c, seed);
      b.texts["montecarlo_" + sm_design + ".csv"] = csv;
      b.documents["montecarlo_" + sm_design + ".json"] = {{"replications", r.replications},
                                                          {"failed", r.failed},
                                                          {"failures", r.failures}};
      const auto dir = resolve_out_dir(common.out_dir, c);
      emit_bundle(b, dir);
      if (!sm_out.empty()) write_text(sm_out, csv);
      out << csv;
      if (!r.failed.empty()) out << r.failed.size() << " replications failed (see " << dir << ")\n";
    } else if (*rp) {
      Config c;
      c.set("input", rp_input);
      ReportBundle b;
      const auto p = prepare(rp_input, 0, 1, true, "none", std::nullopt);
      b.descriptives = descriptive_stats(p.h);
      for (const auto& path : rp_docs) {
        nlohmann::json j;
        try {
          j = nlohmann::json::parse(read_file(path));
        } catch (const nlohmann::json::exception& e) {
          throw ConfigError("cannot parse '" + path + "': " + e.what());
        }
        if (j.contains("model") && j["model"].contains("K")) b.mixtures[j["model"]["K"].get<int>()] = j;
        else if (j.contains("sizes")) b.additive = j;
        else throw ConfigError("'" + path + "' is neither an additive nor a mixture report");
        c.set("include_" + std::filesystem::path(path).filename().string(), path);
      }
      b.meta = meta("report", c, 0);
      const auto dir = resolve_out_dir(common.out_dir, c);
      const auto files = emit_bundle(b, dir);
      out << "report: " << files.size() << " files -> " << dir << "\n";
    } else if (*pl) {
      return pipeline(Config::load(pl_config), common, out);
    }
  } catch (const EstimationError& e) {
    err << "estimation error [" << e.stage() << "]: " << e.message() << "\n";
    return 3;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ParseError& e) {
    err << "input error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace teamprod::cli
