#include "teamprod/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

#include "teamprod/error.hpp"

namespace teamprod {

namespace {

using Rng = std::mt19937_64;

Rng replication_rng(std::uint64_t seed, int replication) {
  std::seed_seq ss{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                   static_cast<std::uint32_t>(replication), 0x51u};
  return Rng(ss);
}

std::string worker_name(int i) { return std::to_string(i); }

std::vector<std::string> all_worker_names(int N) {
  std::vector<std::string> out;
  out.reserve(static_cast<std::size_t>(N));
  for (int i = 0; i < N; ++i) out.push_back(worker_name(i));
  return out;
}

using Teams = std::vector<std::vector<int>>;

bool has_repeat(const std::vector<int>& t) {
  for (std::size_t a = 0; a < t.size(); ++a)
    for (std::size_t b = a + 1; b < t.size(); ++b)
      if (t[a] == t[b]) return true;
  return false;
}

bool contains(const std::vector<int>& t, int w) { return std::find(t.begin(), t.end(), w) != t.end(); }

// Swaps repeated members out of teams in `idx` with members of other teams in `idx`.
void repair(Teams& teams, const std::vector<std::size_t>& idx, Rng& rng) {
  if (idx.empty()) return;
  std::uniform_int_distribution<std::size_t> pick(0, idx.size() - 1);
  for (std::size_t a : idx) {
    int guard = 0;
    while (has_repeat(teams[a])) {
      if (++guard > 100000) throw ConfigError("simulate: could not form teams without repeated members");
      auto& ta = teams[a];
      std::size_t pos = 0;
      for (std::size_t u = 0; u < ta.size() && pos == 0; ++u)
        for (std::size_t v = u + 1; v < ta.size(); ++v)
          if (ta[u] == ta[v]) {
            pos = v;
            break;
          }
      const std::size_t b = idx[pick(rng)];
      if (b == a) continue;
      auto& tb = teams[b];
      std::uniform_int_distribution<std::size_t> slot(0, tb.size() - 1);
      const std::size_t s = slot(rng);
      const int in = tb[s], out = ta[pos];
      if (contains(ta, in)) continue;
      std::vector<int> tb2 = tb;
      tb2[s] = out;
      if (has_repeat(tb2)) continue;
      ta[pos] = in;
      tb = std::move(tb2);
    }
  }
}

std::vector<int> draw_degrees(const NetworkSpec& net, long slots, Rng& rng) {
  const int N = net.workers;
  const long extras = slots - static_cast<long>(N) * net.min_degree;
  if (extras < 0)
    throw ConfigError("simulate: " + std::to_string(slots) + " team slots cannot give " + std::to_string(N) +
                      " workers " + std::to_string(net.min_degree) + " participations each");
  std::vector<int> deg(static_cast<std::size_t>(N), net.min_degree);
  std::normal_distribution<double> z(0.0, 1.0);
  std::vector<double> w(static_cast<std::size_t>(N));
  for (auto& x : w) x = std::exp(net.degree_sigma * z(rng));
  std::discrete_distribution<int> who(w.begin(), w.end());
  for (long e = 0; e < extras; ++e) ++deg[static_cast<std::size_t>(who(rng))];
  return deg;
}

// Team membership for a synthetic network. `type` (may be empty) drives assortative pairing.
Teams synthetic_teams(const NetworkSpec& net, const std::vector<int>& type, int K, Rng& rng) {
  long slots = 0;
  for (std::size_t n = 0; n < net.teams_by_size.size(); ++n) slots += static_cast<long>(n + 1) * net.teams_by_size[n];
  const auto deg = draw_degrees(net, slots, rng);
  std::vector<int> stub;
  stub.reserve(static_cast<std::size_t>(slots));
  for (int i = 0; i < net.workers; ++i)
    for (int d = 0; d < deg[static_cast<std::size_t>(i)]; ++d) stub.push_back(i);
  std::shuffle(stub.begin(), stub.end(), rng);

  Teams teams;
  std::size_t pos = 0;
  const long J1 = net.teams_by_size.empty() ? 0 : net.teams_by_size[0];
  for (long j = 0; j < J1; ++j) teams.push_back({stub[pos++]});

  if (net.assortativity > 0.0) {
    // Only pairs beyond solo teams (validated by the caller).
    std::vector<std::vector<int>> pool(static_cast<std::size_t>(K));
    std::vector<int> open;
    std::bernoulli_distribution sorted(std::min(1.0, net.assortativity));
    for (; pos < stub.size(); ++pos) {
      const int w = stub[pos];
      if (sorted(rng)) pool[static_cast<std::size_t>(type[static_cast<std::size_t>(w)])].push_back(w);
      else open.push_back(w);
    }
    std::vector<std::vector<std::size_t>> groups;
    for (auto& p : pool) {
      if (p.size() % 2 == 1) {
        open.push_back(p.back());
        p.pop_back();
      }
      std::vector<std::size_t> g;
      for (std::size_t u = 0; u < p.size(); u += 2) {
        g.push_back(teams.size());
        teams.push_back({p[u], p[u + 1]});
      }
      groups.push_back(std::move(g));
    }
    if (net.assortativity >= 1.0) {
      for (int w : open) teams.push_back({w});
    } else {
      std::shuffle(open.begin(), open.end(), rng);
      std::vector<std::size_t> g;
      for (std::size_t u = 0; u + 1 < open.size(); u += 2) {
        g.push_back(teams.size());
        teams.push_back({open[u], open[u + 1]});
      }
      groups.push_back(std::move(g));
    }
    for (const auto& g : groups) repair(teams, g, rng);
    return teams;
  }

  std::vector<std::size_t> multi;
  for (std::size_t n = 2; n <= net.teams_by_size.size(); ++n)
    for (long j = 0; j < net.teams_by_size[n - 1]; ++j) {
      multi.push_back(teams.size());
      teams.emplace_back(stub.begin() + static_cast<std::ptrdiff_t>(pos),
                         stub.begin() + static_cast<std::ptrdiff_t>(pos + n));
      pos += n;
    }
  repair(teams, multi, rng);
  return teams;
}

Teams template_teams(const Hypergraph& h) {
  Teams out;
  for (const auto& t : h.teams()) {
    std::vector<int> m;
    for (auto i : t.members) m.push_back(static_cast<int>(i));
    out.push_back(std::move(m));
  }
  return out;
}

std::vector<std::string> template_names(const Hypergraph& h) {
  std::vector<std::string> out;
  for (const auto& w : h.workers()) out.push_back(w.id);
  return out;
}

Hypergraph assemble(const Teams& teams, const std::vector<double>& y, const std::vector<std::string>& names,
                    bool allow_negative) {
  std::vector<TeamRecord> recs;
  recs.reserve(teams.size());
  for (std::size_t j = 0; j < teams.size(); ++j) {
    TeamRecord r;
    r.id = "t" + std::to_string(j);
    for (int w : teams[j]) r.worker_ids.push_back(names[static_cast<std::size_t>(w)]);
    r.output = y[j];
    recs.push_back(std::move(r));
  }
  return Hypergraph::from_records(recs, names, allow_negative);
}

int draw_type(const Eigen::VectorXd& p, Rng& rng) {
  std::discrete_distribution<int> d(p.data(), p.data() + p.size());
  return d(rng);
}

double draw_output(const MixtureModel& m, const TypeParams& t, Rng& rng) {
  if (m.family == Family::lognormal) {
    std::normal_distribution<double> z(t.mean, std::sqrt(t.spread));
    return std::exp(z(rng));
  }
  std::gamma_distribution<double> g(t.spread, t.mean / t.spread);
  std::poisson_distribution<long> pois(g(rng));
  return static_cast<double>(pois(rng));
}

int max_size(const NetworkSpec& net) {
  if (net.mode == NetworkMode::replay) {
    int n = 0;
    for (const auto& t : net.replay_template->teams()) n = std::max(n, t.size());
    return n;
  }
  if (net.mode == NetworkMode::poisson) return 2;
  int n = 0;
  for (std::size_t s = 0; s < net.teams_by_size.size(); ++s)
    if (net.teams_by_size[s] > 0) n = static_cast<int>(s) + 1;
  return n;
}

}  // namespace

void validate(const SimDesign& d) {
  const auto& net = d.network;
  if (d.replications < 1) throw ConfigError("simulate: replications must be >= 1");
  if (net.mode == NetworkMode::replay && !net.replay_template)
    throw ConfigError("simulate: replay network needs a template hypergraph");
  if (net.mode == NetworkMode::synthetic) {
    if (net.workers < 1) throw ConfigError("simulate: workers must be >= 1");
    if (net.min_degree < 0) throw ConfigError("simulate: min_degree must be >= 0");
    for (long c : net.teams_by_size)
      if (c < 0) throw ConfigError("simulate: team counts must be >= 0");
  }
  if (net.assortativity < 0.0 || net.assortativity > 1.0) throw ConfigError("simulate: assortativity must lie in [0,1]");
  if (net.assortativity > 0.0) {
    if (net.mode != NetworkMode::synthetic || d.generator != Generator::mixture ||
        d.mixture.variant == Variant::correlated)
      throw ConfigError("simulate: assortativity needs a synthetic network and a mixture truth with unconditional types");
    if (net.teams_by_size.size() > 2)
      for (std::size_t n = 2; n < net.teams_by_size.size(); ++n)
        if (net.teams_by_size[n] > 0) throw ConfigError("simulate: assortativity supports teams of at most 2");
  }
  if (d.generator == Generator::additive) {
    const auto& a = d.additive;
    if (net.mode == NetworkMode::poisson) throw ConfigError("simulate: poisson formation needs a mixture truth");
    const auto n = static_cast<std::size_t>(max_size(net));
    if (a.lambda.size() < n || a.sigma.size() < n) throw ConfigError("simulate: lambda and sigma must cover every team size");
    if (!a.shift.empty() && a.shift.size() < n) throw ConfigError("simulate: shift must cover every team size");
    for (double s : a.sigma)
      if (!(s >= 0.0)) throw ConfigError("simulate: sigma must be >= 0");
    if (!(a.alpha_sd >= 0.0)) throw ConfigError("simulate: alpha_sd must be >= 0");
    if (a.alpha) {
      const std::size_t N = net.mode == NetworkMode::replay ? net.replay_template->n_workers()
                                                             : static_cast<std::size_t>(net.workers);
      if (a.alpha->size() != N) throw ConfigError("simulate: fixed alpha must have one value per worker");
    }
    return;
  }
  const auto& m = d.mixture;
  if (m.K < 1) throw ConfigError("simulate: K must be >= 1");
  if (max_size(net) > 2) throw ConfigError("simulate: mixture designs support teams of at most 2");
  if (m.variant != Variant::correlated) {
    if (m.pi.size() != m.K || (m.pi.array() < 0.0).any() || std::abs(m.pi.sum() - 1.0) > 1e-9)
      throw ConfigError("simulate: pi must be a probability vector of length K");
  }
  if (static_cast<int>(m.theta1.size()) != m.K || static_cast<int>(m.theta2.size()) != m.K * m.K)
    throw ConfigError("simulate: theta sizes do not match K");
  for (int k = 0; k < m.K; ++k)
    for (int kp = 0; kp < m.K; ++kp) {
      const auto& a = m.t2(k, kp);
      const auto& b = m.t2(kp, k);
      if (a.mean != b.mean || a.spread != b.spread) throw ConfigError("simulate: theta2 must be symmetric");
    }
  std::vector<TypeParams> all = m.theta1;
  all.insert(all.end(), m.theta2.begin(), m.theta2.end());
  for (const auto& t : all) {
    if (!(t.spread > 0.0)) throw ConfigError("simulate: variances and dispersions must be > 0");
    if (m.family == Family::negbin && !(t.mean > 0.0)) throw ConfigError("simulate: negative binomial means must be > 0");
  }
  if (net.mode == NetworkMode::poisson &&
      (m.variant != Variant::joint || m.rho1.size() != m.K || m.rho2.rows() != m.K || m.rho2.cols() != m.K))
    throw ConfigError("simulate: poisson formation needs a joint truth with rho1 and rho2");
  if (m.variant == Variant::joint && net.mode != NetworkMode::poisson)
    throw ConfigError("simulate: a joint truth forms teams by poisson formation");
}

SimDraw simulate_additive(const SimDesign& d, int replication) {
  if (d.generator != Generator::additive) throw ConfigError("simulate_additive: design is not additive");
  validate(d);
  Rng rng = replication_rng(d.seed, replication);
  const auto& net = d.network;
  const auto& a = d.additive;
  Teams teams;
  std::vector<std::string> names;
  if (net.mode == NetworkMode::replay) {
    teams = template_teams(*net.replay_template);
    names = template_names(*net.replay_template);
  } else {
    teams = synthetic_teams(net, {}, 1, rng);
    names = all_worker_names(net.workers);
  }
  SimDraw out;
  out.replication = replication;
  if (a.alpha) {
    out.alpha = *a.alpha;
  } else {
    std::normal_distribution<double> al(a.alpha_mean, a.alpha_sd);
    out.alpha.resize(names.size());
    for (auto& x : out.alpha) x = al(rng);
  }
  std::normal_distribution<double> z(0.0, 1.0);
  std::vector<double> y(teams.size());
  for (std::size_t j = 0; j < teams.size(); ++j) {
    const auto n = teams[j].size();
    double s = 0.0;
    for (int w : teams[j]) s += out.alpha[static_cast<std::size_t>(w)];
    const double shift = a.shift.empty() ? 0.0 : a.shift[n - 1];
    y[j] = shift + a.lambda[n - 1] * s + a.sigma[n - 1] * z(rng);
  }
  out.h = assemble(teams, y, names, true);
  return out;
}

SimDraw simulate_mixture(const SimDesign& d, int replication) {
  if (d.generator != Generator::mixture) throw ConfigError("simulate_mixture: design is not a mixture");
  validate(d);
  Rng rng = replication_rng(d.seed, replication);
  const auto& net = d.network;
  const auto& m = d.mixture;
  Teams teams;
  std::vector<std::string> names;
  std::vector<int> type;
  const auto draw_unconditional = [&](std::size_t N) {
    type.resize(N);
    for (auto& t : type) t = draw_type(m.pi, rng);
  };

  if (net.mode == NetworkMode::replay) {
    teams = template_teams(*net.replay_template);
    names = template_names(*net.replay_template);
    if (m.variant != Variant::correlated) draw_unconditional(names.size());
  } else if (net.mode == NetworkMode::poisson) {
    names = all_worker_names(net.workers);
    draw_unconditional(names.size());
    for (int i = 0; i < net.workers; ++i) {
      std::poisson_distribution<long> c1(m.rho1(type[static_cast<std::size_t>(i)]));
      for (long c = c1(rng); c > 0; --c) teams.push_back({i});
    }
    for (int i = 0; i < net.workers; ++i)
      for (int ip = i + 1; ip < net.workers; ++ip) {
        const double rate = m.rho2(type[static_cast<std::size_t>(i)], type[static_cast<std::size_t>(ip)]);
        if (!(rate > 0.0)) continue;
        std::poisson_distribution<long> c2(rate);
        for (long c = c2(rng); c > 0; --c) teams.push_back({i, ip});
      }
  } else {
    names = all_worker_names(net.workers);
    if (m.variant != Variant::correlated) draw_unconditional(names.size());
    teams = synthetic_teams(net, type, m.K, rng);
  }

  if (m.variant == Variant::correlated) {
    // Types depend on collaboration counts, so they are drawn after the structure.
    const Hypergraph shape = assemble(teams, std::vector<double>(teams.size(), 1.0), names, false);
    const Eigen::MatrixXd prior = prior_matrix(m, shape);
    type.resize(names.size());
    for (std::size_t i = 0; i < names.size(); ++i)
      type[i] = draw_type(prior.row(static_cast<Eigen::Index>(i)).transpose(), rng);
  }

  std::vector<double> y(teams.size());
  for (std::size_t j = 0; j < teams.size(); ++j) {
    const auto& t = teams[j];
    const int ka = type[static_cast<std::size_t>(t[0])];
    y[j] = t.size() == 1 ? draw_output(m, m.theta1[static_cast<std::size_t>(ka)], rng)
                         : draw_output(m, m.t2(ka, type[static_cast<std::size_t>(t[1])]), rng);
  }
  SimDraw out;
  out.replication = replication;
  out.h = assemble(teams, y, names, false);
  out.type = std::move(type);
  return out;
}

SimDraw simulate(const SimDesign& d, int replication) {
  return d.generator == Generator::additive ? simulate_additive(d, replication) : simulate_mixture(d, replication);
}

NetworkSpec larger_network() {
  NetworkSpec n;
  n.workers = 921;
  n.teams_by_size = {4554, 893};
  return n;
}

NetworkSpec smaller_network() {
  NetworkSpec n;
  n.workers = 156;
  n.teams_by_size = {749, 147};
  return n;
}

namespace {

MixtureModel lognormal_truth(const std::vector<double>& pi, const std::vector<double>& mean1,
                             const std::vector<double>& var1, const std::vector<double>& mean2,
                             const std::vector<double>& var2) {
  const int K = static_cast<int>(pi.size());
  MixtureModel m = MixtureModel::initial(K, Family::lognormal, Variant::independent);
  m.pi = Eigen::Map<const Eigen::VectorXd>(pi.data(), K);
  for (int k = 0; k < K; ++k) m.theta1[static_cast<std::size_t>(k)] = {mean1[static_cast<std::size_t>(k)], var1[static_cast<std::size_t>(k)]};
  // Pair cells listed as (1,1),(1,2),(2,2),(1,3),... .
  std::size_t c = 0;
  for (int kp = 0; kp < K; ++kp)
    for (int k = 0; k <= kp; ++k, ++c) m.t2(k, kp) = m.t2(kp, k) = {mean2[c], var2[c]};
  return m;
}

}  // namespace

SimDesign builtin_design(const std::string& name) {
  SimDesign d;
  d.name = name;
  const bool small = name.size() > 6 && name.substr(name.size() - 6) == "-small";
  const std::string base = small ? name.substr(0, name.size() - 6) : name;
  if (base == "panelA2") {
    d.mixture = lognormal_truth({0.6, 0.4}, {0.0, 2.0}, {0.5, 0.5}, {0.0, 1.0, 4.0}, {0.5, 0.5, 0.5});
    d.network = small ? smaller_network() : larger_network();
  } else if (base == "panelB4") {
    d.mixture = lognormal_truth({0.15, 0.20, 0.36, 0.29}, {-0.52, -0.47, 0.07, 1.62}, {0.01, 0.48, 1.74, 2.16},
                                {-0.53, -0.39, -0.53, 0.01, -0.11, 0.35, 1.38, 0.66, 1.36, 2.35},
                                {0.01, 0.43, 0.01, 1.76, 1.18, 1.98, 2.09, 1.48, 1.91, 1.61});
    d.network = small ? smaller_network() : larger_network();
  } else if (base == "additive-types") {
    const double v = 0.5;
    const std::vector<double> a = {std::exp(0.0 + v / 2), std::exp(2.0 + v / 2)};
    const std::vector<double> m2 = {std::log(a[0] + a[0]) - v / 2, std::log(a[0] + a[1]) - v / 2,
                                    std::log(a[1] + a[1]) - v / 2};
    d.mixture = lognormal_truth({0.6, 0.4}, {0.0, 2.0}, {v, v}, m2, {v, v, v});
    d.network = small ? smaller_network() : larger_network();
  } else if (base == "additive") {
    d.generator = Generator::additive;
    d.additive.sigma = {1.2, 1.15, 1.0};
    if (small) {
      d.network.workers = 50;
      d.network.teams_by_size = {150, 150, 80};
    } else {
      d.network.workers = 4000;
      d.network.teams_by_size = {14000, 5000, 1200};
    }
  } else {
    throw ConfigError("unknown design '" + name + "'");
  }
  return d;
}

std::vector<std::string> builtin_design_names() {
  return {"panelA2", "panelA2-small", "panelB4", "panelB4-small", "additive-types", "additive-types-small",
          "additive", "additive-small"};
}

std::vector<std::string> mixture_parameter_names(int K) {
  std::vector<std::string> out;
  for (int k = 1; k <= K; ++k) out.push_back("Mean type " + std::to_string(k));
  for (int k = 1; k <= K; ++k) out.push_back("Var. type " + std::to_string(k));
  for (const std::string what : {"Mean", "Var."})
    for (int kp = 1; kp <= K; ++kp)
      for (int k = 1; k <= kp; ++k)
        out.push_back(what + " type (" + std::to_string(k) + "," + std::to_string(kp) + ")");
  for (int k = 1; k < K; ++k) out.push_back("Prop. type " + std::to_string(k));
  return out;
}

std::vector<double> mixture_parameters(const MixtureModel& m) {
  std::vector<double> out;
  for (int k = 0; k < m.K; ++k) out.push_back(m.theta1[static_cast<std::size_t>(k)].mean);
  for (int k = 0; k < m.K; ++k) out.push_back(m.theta1[static_cast<std::size_t>(k)].spread);
  for (int kp = 0; kp < m.K; ++kp)
    for (int k = 0; k <= kp; ++k) out.push_back(m.t2(k, kp).mean);
  for (int kp = 0; kp < m.K; ++kp)
    for (int k = 0; k <= kp; ++k) out.push_back(m.t2(k, kp).spread);
  for (int k = 0; k + 1 < m.K; ++k) out.push_back(m.pi.size() == m.K ? m.pi(k) : std::nan(""));
  return out;
}

namespace {

// Proportions from mean posterior rows when the model has no unconditional pi.
std::vector<double> with_proportions(std::vector<double> p, const MixtureModel& m, const Eigen::MatrixXd& q) {
  if (m.variant != Variant::correlated) return p;
  const Eigen::VectorXd share = q.colwise().mean().transpose();
  for (int k = 0; k + 1 < m.K; ++k) p[p.size() - static_cast<std::size_t>(m.K - 1) + static_cast<std::size_t>(k)] = share(k);
  return p;
}

Eigen::MatrixXd one_hot(const std::vector<int>& type, int K) {
  Eigen::MatrixXd q = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(type.size()), K);
  for (std::size_t i = 0; i < type.size(); ++i) q(static_cast<Eigen::Index>(i), type[i]) = 1.0;
  return q;
}

std::vector<double> nonlinear_row(const std::vector<NonlinearComponents>& c) {
  for (const auto& r : c)
    if (r.n == 2)
      return {r.total, r.heterogeneity, r.sorting.value_or(std::nan("")), r.nonlinearities.value_or(std::nan("")),
              r.other};
  throw EstimationError("nonlinear_estimator", "no 2-worker teams");
}

}  // namespace

Estimator mixture_estimator(const SimDesign& d, const MixtureOptions& opt) {
  if (d.generator != Generator::mixture) throw ConfigError("mixture_estimator: design is not a mixture");
  Estimator e;
  e.names = mixture_parameter_names(d.mixture.K);
  e.truth = mixture_parameters(d.mixture);
  if (d.mixture.variant == Variant::correlated) {
    const SimDraw first = simulate_mixture(d, 0);
    e.truth = with_proportions(e.truth, d.mixture, prior_matrix(d.mixture, first.h));
  }
  e.estimate = [opt](const SimDraw& draw) {
    const MixtureFit f = fit_mixture(draw.h, opt);
    return with_proportions(mixture_parameters(f.model), f.model, f.state.q);
  };
  return e;
}

Estimator identity_estimator(const SimDesign& d) {
  Estimator e;
  if (d.generator == Generator::mixture) {
    e.names = mixture_parameter_names(d.mixture.K);
    e.truth = mixture_parameters(d.mixture);
  } else {
    for (std::size_t n = 0; n < d.additive.lambda.size(); ++n) {
      e.names.push_back("lambda n=" + std::to_string(n + 1));
      e.truth.push_back(d.additive.lambda[n]);
    }
  }
  e.estimate = [t = e.truth](const SimDraw&) { return t; };
  return e;
}

Estimator nonlinear_estimator(const SimDesign& d, const MixtureOptions& opt) {
  if (d.generator != Generator::mixture) throw ConfigError("nonlinear_estimator: design is not a mixture");
  Estimator e;
  e.names = {"total n=2", "heterogeneity n=2", "sorting n=2", "nonlinearities n=2", "other n=2"};
  const SimDraw first = simulate_mixture(d, 0);
  VariationalState truth_state;
  truth_state.q = one_hot(first.type, d.mixture.K);
  e.truth = nonlinear_row(nonlinear_variance_decomposition(d.mixture, truth_state, first.h));
  e.estimate = [opt](const SimDraw& draw) {
    const MixtureFit f = fit_mixture(draw.h, opt);
    return nonlinear_row(nonlinear_variance_decomposition(f.model, f.state, draw.h));
  };
  return e;
}

Estimator additive_estimator(const SimDesign& d, const AdditiveOptions& opt) {
  if (d.generator != Generator::additive) throw ConfigError("additive_estimator: design is not additive");
  const int S = max_size(d.network);
  Estimator e;
  for (int n = 2; n <= S; ++n) {
    e.names.push_back("lambda n=" + std::to_string(n));
    e.truth.push_back(d.additive.lambda[static_cast<std::size_t>(n - 1)]);
  }
  for (int n = 1; n <= S; ++n) {
    e.names.push_back("sigma2 n=" + std::to_string(n));
    e.truth.push_back(std::pow(d.additive.sigma[static_cast<std::size_t>(n - 1)], 2));
  }
  e.estimate = [opt, S](const SimDraw& draw) {
    const auto r = fit_additive(draw.h, opt);
    std::vector<double> v;
    for (int n = 2; n <= S; ++n) v.push_back(r.fit.lambda.has(n) ? r.fit.lambda.at(n) : std::nan(""));
    for (int n = 1; n <= S; ++n) v.push_back(r.fit.sigma2.count(n) ? r.fit.sigma2.at(n) : std::nan(""));
    return v;
  };
  return e;
}

namespace {

double nearest_rank(std::vector<double> x, double p) {
  std::sort(x.begin(), x.end());
  const auto n = static_cast<long>(x.size());
  long r = static_cast<long>(std::ceil(p * static_cast<double>(n) - 1e-12));
  r = std::clamp(r, 1L, n);
  return x[static_cast<std::size_t>(r - 1)];
}

}  // namespace

MonteCarloReport run_monte_carlo(const SimDesign& d, const Estimator& est, int threads) {
  validate(d);
  const int R = d.replications;
  const auto P = static_cast<Eigen::Index>(est.names.size());
  if (est.truth.size() != est.names.size()) throw ConfigError("run_monte_carlo: truth and names differ in length");
  MonteCarloReport r;
  r.design = d.name;
  r.names = est.names;
  r.truth = est.truth;
  Eigen::MatrixXd all = Eigen::MatrixXd::Constant(R, P, std::nan(""));
  std::vector<std::string> err(static_cast<std::size_t>(R));
  std::vector<char> ok(static_cast<std::size_t>(R), 0);

  std::mutex mu;
  std::exception_ptr fatal;
  int next = 0;
  const auto work = [&] {
    while (true) {
      int rep;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next >= R || fatal) return;
        rep = next++;
      }
      try {
        const SimDraw draw = simulate(d, rep);
        try {
          const auto v = est.estimate(draw);
          if (static_cast<Eigen::Index>(v.size()) != P) throw ConfigError("run_monte_carlo: estimator returned the wrong length");
          for (Eigen::Index p = 0; p < P; ++p) all(rep, p) = v[static_cast<std::size_t>(p)];
          ok[static_cast<std::size_t>(rep)] = 1;
        } catch (const EstimationError& e) {
          err[static_cast<std::size_t>(rep)] = e.what();
        } catch (const DataError& e) {
          err[static_cast<std::size_t>(rep)] = e.what();
        }
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!fatal) fatal = std::current_exception();
      }
    }
  };
  const int T = std::max(1, std::min(threads, R));
  if (T == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < T; ++t) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (fatal) std::rethrow_exception(fatal);

  std::vector<int> good;
  for (int rep = 0; rep < R; ++rep) {
    if (ok[static_cast<std::size_t>(rep)]) good.push_back(rep);
    else {
      r.failed.push_back(rep);
      r.failures.push_back(err[static_cast<std::size_t>(rep)]);
    }
  }
  r.replications = static_cast<int>(good.size());
  r.estimates.resize(static_cast<Eigen::Index>(good.size()), P);
  for (std::size_t g = 0; g < good.size(); ++g) r.estimates.row(static_cast<Eigen::Index>(g)) = all.row(good[g]);
  for (Eigen::Index p = 0; p < P; ++p) {
    if (good.empty()) {
      for (auto* v : {&r.mean, &r.sd, &r.p025, &r.p975}) v->push_back(std::nan(""));
      continue;
    }
    std::vector<double> x(r.estimates.col(p).data(), r.estimates.col(p).data() + r.estimates.rows());
    double s = 0.0;
    for (double v : x) s += v;
    const double mean = s / static_cast<double>(x.size());
    double ss = 0.0;
    for (double v : x) ss += (v - mean) * (v - mean);
    r.mean.push_back(mean);
    r.sd.push_back(x.size() > 1 ? std::sqrt(ss / static_cast<double>(x.size() - 1)) : 0.0);
    r.p025.push_back(nearest_rank(x, 0.025));
    r.p975.push_back(nearest_rank(x, 0.975));
  }
  return r;
}

std::string to_csv(const MonteCarloReport& r) {
  const auto g = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return std::string(buf);
  };
  std::ostringstream os;
  os << "parameter,true,mean,p2.5,p97.5\n";
  for (std::size_t p = 0; p < r.names.size(); ++p)
    os << '"' << r.names[p] << "\"," << g(r.truth[p]) << ',' << g(r.mean[p]) << ',' << g(r.p025[p]) << ','
       << g(r.p975[p]) << '\n';
  return os.str();
}

}  // namespace teamprod
