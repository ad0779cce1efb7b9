#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <boost/math/distributions/lognormal.hpp>
#include <boost/math/distributions/negative_binomial.hpp>
#include <boost/math/distributions/poisson.hpp>

#include "fixtures.hpp"
#include "mixture_oracle.hpp"
#include "mixture_world.hpp"
#include "teamprod/error.hpp"
#include "teamprod/mixture_ve.hpp"

using namespace teamprod;
using doctest::Approx;

using namespace oracle;

namespace {

void check_monotone(const VariationalState& s) {
  CHECK(s.monotone_violations == 0);
  for (std::size_t t = 1; t < s.elbo_trace.size(); ++t) {
    const double slack = 1e-9 * std::max(1.0, std::abs(s.elbo_trace[t - 1]));
    CHECK(s.elbo_trace[t] >= s.elbo_trace[t - 1] - slack);
  }
}

}  // namespace

TEST_CASE("loglik_team") {
  MixtureModel m = MixtureModel::initial(2, Family::lognormal, Variant::independent);
  SUBCASE("log-normal with E[Y] = 1 at y = 1") {
    m.theta1[0] = {-0.25, 0.5};
    CHECK(std::exp(-0.25 + 0.25) == Approx(1.0));
    const double want = -0.5 * std::log(2 * M_PI * 0.5) - 0.25 * 0.25 / (2 * 0.5);
    CHECK(loglik_team(m, 0, 1.0) == Approx(want).epsilon(1e-14));
    CHECK(implied_mean(m, 0) == Approx(1.0));
  }
  SUBCASE("symmetric in the two types") {
    m.t2(0, 1) = m.t2(1, 0) = {0.3, 0.7};
    CHECK(loglik_team(m, 0, 1, 2.5) == loglik_team(m, 1, 0, 2.5));
  }
  SUBCASE("unsupported y") {
    CHECK_THROWS_AS(loglik_team(m, 0, 0.0), DataError);
    m.family = Family::negbin;
    m.theta1[0] = {2.0, 1.0};
    CHECK_THROWS_AS(loglik_team(m, 0, 1.5), DataError);
    CHECK_THROWS_AS(loglik_team(m, 0, -1.0), DataError);
  }
  SUBCASE("negative binomial matches the reference pmf and its Poisson limit") {
    m.family = Family::negbin;
    for (double r : {0.3, 1.0, 7.5})
      for (double y : {0.0, 1.0, 3.0, 40.0, 120.0}) {
        m.theta1[0] = {4.2, r};
        CHECK(loglik_team(m, 0, y) == Approx(oracle_logf(m, m.theta1[0], y)).epsilon(1e-10));
      }
    m.theta1[0] = {2.0, 1e9};
    const double poisson = std::log(boost::math::pdf(boost::math::poisson_distribution<double>(2.0), 3.0));
    CHECK(std::abs(loglik_team(m, 0, 3.0) - poisson) < 1e-6);
  }
}

TEST_CASE("ELBO against exhaustive enumeration") {
  std::mt19937_64 rng(100);
  SUBCASE("bounded by the exact log-likelihood on random small instances") {
    for (int rep = 0; rep < 50; ++rep) {
      const int N = 3 + rep % 6;
      const int K = 2 + rep % 2;
      const Family f = rep % 3 == 0 ? Family::negbin : Family::lognormal;
      const Variant v = static_cast<Variant>(rep % 3);
      const auto h = random_small_graph(rng, N, f);
      const auto m = random_model(rng, K, f, v);
      VariationalState s;
      s.q = random_q(rng, static_cast<int>(h.n_workers()), K);
      const double exact = exhaustive_loglik(m, h);
      CHECK(elbo(m, s, h) <= exact + 1e-9);
      // Coordinate ascent keeps the bound and raises the ELBO.
      double prev = elbo(m, s, h);
      for (int sweep = 0; sweep < 3; ++sweep)
        for (WorkerIndex i = 0; i < h.n_workers(); ++i) {
          s.q.row(static_cast<Eigen::Index>(i)) = update_q(m, s, h, i).transpose();
          const double cur = elbo(m, s, h);
          CHECK(cur >= prev - 1e-9 * std::max(1.0, std::abs(prev)));
          prev = cur;
        }
      CHECK(prev <= exact + 1e-9);
    }
  }
  SUBCASE("K = 1 gives the exact log-likelihood") {
    for (Variant v : {Variant::independent, Variant::joint}) {
      const auto h = random_small_graph(rng, 5, Family::lognormal);
      const auto m = random_model(rng, 1, Family::lognormal, v);
      VariationalState s;
      s.q = Eigen::MatrixXd::Ones(static_cast<Eigen::Index>(h.n_workers()), 1);
      CHECK(elbo(m, s, h) == Approx(exhaustive_loglik(m, h)).epsilon(1e-12));
    }
  }
  SUBCASE("solo-only data: exact at the Bayes posterior") {
    const auto h = records_graph({{1}, {1}, {2}, {3}, {3}, {3}}, {0.5, 1.2, 4.0, 2.0, 2.5, 0.9});
    const auto m = random_model(rng, 3, Family::lognormal, Variant::independent);
    VariationalState s;
    s.q = Eigen::MatrixXd(3, 3);
    for (WorkerIndex i = 0; i < 3; ++i) {
      std::vector<double> lw;
      for (int k = 0; k < 3; ++k) {
        double v = std::log(m.pi(k));
        for (auto j : h.teams_of(i)) v += oracle_logf(m, m.theta1[static_cast<std::size_t>(k)], h.team(j).output);
        lw.push_back(v);
      }
      const double lse = log_sum_exp(lw);
      for (int k = 0; k < 3; ++k) s.q(static_cast<Eigen::Index>(i), k) = std::exp(lw[static_cast<std::size_t>(k)] - lse);
    }
    CHECK(elbo(m, s, h) == Approx(exhaustive_loglik(m, h)).epsilon(1e-12));
    // The coordinate update reproduces the Bayes posterior.
    VariationalState u = s;
    u.q.setConstant(1.0 / 3);
    for (WorkerIndex i = 0; i < 3; ++i) {
      const Eigen::VectorXd qi = update_q(m, u, h, i);
      CHECK((qi - s.q.row(static_cast<Eigen::Index>(i)).transpose()).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
  SUBCASE("zero-mass q row is an error") {
    const auto h = records_graph({{1}, {2}}, {1.0, 2.0});
    const auto m = MixtureModel::initial(2, Family::lognormal, Variant::independent);
    VariationalState s;
    s.q = Eigen::MatrixXd::Zero(2, 2);
    s.q(0, 0) = 1.0;
    CHECK_THROWS_AS(elbo(m, s, h), DataError);
  }
}

TEST_CASE("update_q") {
  SUBCASE("worker without teams keeps the prior") {
    std::vector<TeamRecord> recs = {{"a", {"1"}, 2.0, std::nullopt, std::nullopt}};
    const auto h = Hypergraph::from_records(recs, {"9"});
    auto m = MixtureModel::initial(2, Family::lognormal, Variant::independent);
    m.pi << 0.3, 0.7;
    VariationalState s;
    s.q = Eigen::MatrixXd::Constant(2, 2, 0.5);
    const auto i = *h.find_worker("9");
    const Eigen::VectorXd q = update_q(m, s, h, i);
    CHECK(q(0) == Approx(0.3));
    CHECK(q(1) == Approx(0.7));
  }
  SUBCASE("two-worker chain: a sweep strictly raises the ELBO away from a fixed point") {
    const auto h = records_graph({{1}, {1, 2}, {2}}, {0.5, 3.0, 6.0});
    auto m = MixtureModel::initial(2, Family::lognormal, Variant::independent);
    m.theta1 = {{0.0, 0.5}, {2.0, 0.5}};
    m.theta2 = {{0.0, 0.5}, {1.0, 0.5}, {1.0, 0.5}, {4.0, 0.5}};
    VariationalState s;
    s.q = Eigen::MatrixXd::Constant(2, 2, 0.5);
    const double before = elbo(m, s, h);
    for (WorkerIndex i = 0; i < 2; ++i) s.q.row(static_cast<Eigen::Index>(i)) = update_q(m, s, h, i).transpose();
    const double after = elbo(m, s, h);
    CHECK(after > before);
    VariationalState again = s;
    for (int sweep = 0; sweep < 200; ++sweep)
      for (WorkerIndex i = 0; i < 2; ++i) again.q.row(static_cast<Eigen::Index>(i)) = update_q(m, again, h, i).transpose();
    VariationalState once = again;
    for (WorkerIndex i = 0; i < 2; ++i) once.q.row(static_cast<Eigen::Index>(i)) = update_q(m, once, h, i).transpose();
    CHECK(elbo(m, once, h) == Approx(elbo(m, again, h)).epsilon(1e-12));
  }
}

TEST_CASE("m_step") {
  std::mt19937_64 rng(200);
  const auto truth = fixtures::panel_a_truth();
  const auto w = fixtures::lognormal_world(rng, truth, 200, 3, 400);
  VariationalState s;
  s.q = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(w.h.n_workers()), 2);
  for (std::size_t i = 0; i < w.type.size(); ++i) s.q(static_cast<Eigen::Index>(i), w.type[i]) = 1.0;

  SUBCASE("one-hot q gives per-group maximum likelihood") {
    const auto m = m_step(MixtureModel::initial(2, Family::lognormal, Variant::independent), s, w.h);
    std::vector<std::vector<double>> g1(2);
    std::map<std::pair<int, int>, std::vector<double>> g2;
    for (const auto& t : w.h.teams()) {
      if (t.size() == 1) {
        g1[static_cast<std::size_t>(w.type[t.members[0]])].push_back(std::log(t.output));
      } else {
        int a = w.type[t.members[0]], b = w.type[t.members[1]];
        if (a > b) std::swap(a, b);
        g2[{a, b}].push_back(std::log(t.output));
      }
    }
    const auto mle = [](const std::vector<double>& x) {
      const double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
      double v = 0.0;
      for (double e : x) v += (e - mean) * (e - mean);
      return std::make_pair(mean, v / static_cast<double>(x.size()));
    };
    for (int k = 0; k < 2; ++k) {
      const auto [mu, var] = mle(g1[static_cast<std::size_t>(k)]);
      CHECK(m.theta1[static_cast<std::size_t>(k)].mean == Approx(mu).epsilon(1e-12));
      CHECK(m.theta1[static_cast<std::size_t>(k)].spread == Approx(var).epsilon(1e-12));
    }
    for (const auto& [cell, x] : g2) {
      const auto [mu, var] = mle(x);
      CHECK(m.t2(cell.first, cell.second).mean == Approx(mu).epsilon(1e-12));
      CHECK(m.t2(cell.second, cell.first).spread == Approx(var).epsilon(1e-12));
    }
    const double share0 = static_cast<double>(std::count(w.type.begin(), w.type.end(), 0)) / static_cast<double>(w.type.size());
    CHECK(m.pi(0) == Approx(share0));
  }
  SUBCASE("uniform q on symmetric data gives equal solo types") {
    VariationalState u;
    u.q = Eigen::MatrixXd::Constant(s.q.rows(), 2, 0.5);
    const auto m = m_step(MixtureModel::initial(2, Family::lognormal, Variant::independent), u, w.h);
    CHECK(m.theta1[0].mean == Approx(m.theta1[1].mean));
    CHECK(m.theta1[0].spread == Approx(m.theta1[1].spread));
  }
  SUBCASE("negative binomial one-hot q gives group means and a profile-optimal dispersion") {
    const auto hb = records_graph({{1}, {1}, {1}, {2}, {2}, {2}}, {0, 4, 11, 2, 3, 2});
    VariationalState b;
    b.q = Eigen::MatrixXd::Zero(2, 2);
    b.q(0, 0) = b.q(1, 1) = 1.0;
    const auto m = m_step(MixtureModel::initial(2, Family::negbin, Variant::independent), b, hb);
    CHECK(m.theta1[0].mean == Approx(5.0));
    CHECK(m.theta1[1].mean == Approx(7.0 / 3.0));
    // Overdispersed group: the profile likelihood is higher at the fitted r than nearby.
    const auto ll = [&](double r) {
      double s2 = 0.0;
      for (double y : {0.0, 4.0, 11.0}) s2 += negbin_logpmf(y, 5.0, r);
      return s2;
    };
    const double r = m.theta1[0].spread;
    CHECK(ll(r) >= ll(r * 1.05));
    CHECK(ll(r) >= ll(r / 1.05));
    // Underdispersed group goes to the Poisson end.
    CHECK(m.theta1[1].spread > 1e6);
  }
  SUBCASE("Poisson rate with one type") {
    const auto hp = records_graph({{1}, {1}, {1}}, {1.0, 2.0, 3.0});
    VariationalState one;
    one.q = Eigen::MatrixXd::Ones(1, 1);
    const auto m = m_step(MixtureModel::initial(1, Family::lognormal, Variant::joint), one, hp);
    CHECK(m.rho1(0) == Approx(3.0));
  }
  SUBCASE("cells below the weight floor are held and flagged") {
    const auto hs = records_graph({{1}, {2}, {1, 2}}, {1.0, 2.0, 3.0});
    VariationalState one;
    one.q = Eigen::MatrixXd::Zero(2, 2);
    one.q(0, 0) = one.q(1, 0) = 1.0;
    auto prev = MixtureModel::initial(2, Family::lognormal, Variant::independent);
    prev.t2(1, 1) = {7.0, 0.25};
    const auto m = m_step(prev, one, hs);
    CHECK(m.t2(1, 1).mean == 7.0);
    CHECK(std::find(m.held_pairs.begin(), m.held_pairs.end(), std::make_pair(1, 1)) != m.held_pairs.end());
    CHECK(std::find(m.held_types.begin(), m.held_types.end(), 1) != m.held_types.end());
  }
  SUBCASE("teams of three are rejected") {
    CHECK_THROWS_AS(m_step(MixtureModel::initial(2, Family::lognormal, Variant::independent), s,
                           records_graph({{1, 2, 3}}, {1.0})),
                    DataError);
  }
}

TEST_CASE("relabeling permutes everything and keeps the ELBO") {
  std::mt19937_64 rng(300);
  for (Variant v : {Variant::independent, Variant::correlated, Variant::joint}) {
    const auto h = random_small_graph(rng, 7, Family::lognormal);
    auto m = random_model(rng, 3, Family::lognormal, v);
    m.logit_coef.row(0).setZero();
    VariationalState s;
    s.q = random_q(rng, static_cast<int>(h.n_workers()), 3);
    const double before = elbo(m, s, h);
    const MixtureModel m0 = m;
    const VariationalState s0 = s;
    relabel(m, s, {2, 0, 1});
    CHECK(elbo(m, s, h) == Approx(before).epsilon(1e-12));
    CHECK(m.theta1[0].mean == m0.theta1[2].mean);
    CHECK(m.t2(0, 1).mean == m0.t2(2, 0).mean);
    CHECK(s.q.col(1) == s0.q.col(0));
    CHECK((prior_matrix(m, h).col(0) - prior_matrix(m0, h).col(2)).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("fit_mixture") {
  std::mt19937_64 rng(400);
  const auto truth = fixtures::panel_a_truth();

  SUBCASE("recovers the two-type design") {
    const auto w = fixtures::lognormal_world(rng, truth, 400, 6, 1200);
    MixtureOptions opt;
    opt.restarts = 3;
    const auto fit = fit_mixture(w.h, opt);
    check_monotone(fit.state);
    CHECK(fit.state.converged);
    const auto& m = fit.model;
    CHECK(std::abs(m.theta1[0].mean - 0.0) < 0.1);
    CHECK(std::abs(m.theta1[1].mean - 2.0) < 0.1);
    CHECK(std::abs(m.t2(1, 1).mean - 4.0) < 0.2);
    CHECK(std::abs(m.t2(0, 1).mean - 1.0) < 0.15);
    CHECK(std::abs(m.pi(0) - 0.6) < 0.06);
    for (int k = 0; k < 2; ++k)
      for (int kp = 0; kp < 2; ++kp) CHECK(m.t2(k, kp).mean == m.t2(kp, k).mean);
    for (Eigen::Index i = 0; i < fit.state.q.rows(); ++i) CHECK(fit.state.q.row(i).sum() == Approx(1.0));
    CHECK(fit.state.restarts_used == 3);
  }
  SUBCASE("every variant and family keeps the ELBO monotone") {
    const auto w = fixtures::lognormal_world(rng, truth, 120, 4, 300);
    for (Variant v : {Variant::independent, Variant::correlated, Variant::joint}) {
      MixtureOptions opt;
      opt.variant = v;
      opt.restarts = 2;
      const auto fit = fit_mixture(w.h, opt);
      check_monotone(fit.state);
      CHECK(fit.model.theta1[0].mean <= fit.model.theta1[1].mean);
    }
    std::vector<double> counts;
    for (const auto& t : w.h.teams()) counts.push_back(std::round(3.0 * t.output));
    MixtureOptions opt;
    opt.family = Family::negbin;
    opt.restarts = 2;
    const auto fit = fit_mixture(w.h.with_outputs(counts), opt);
    check_monotone(fit.state);
    CHECK(fit.model.rounded_outputs == 0);
  }
  SUBCASE("K = 1 reduces to single-family maximum likelihood") {
    const auto w = fixtures::lognormal_world(rng, truth, 60, 3, 80);
    MixtureOptions opt;
    opt.K = 1;
    opt.restarts = 1;
    const auto fit = fit_mixture(w.h, opt);
    double m = 0.0;
    int n = 0;
    for (const auto& t : w.h.teams())
      if (t.size() == 1) {
        m += std::log(t.output);
        ++n;
      }
    CHECK(fit.model.theta1[0].mean == Approx(m / n).epsilon(1e-12));
    const auto k1 = nonlinear_variance_decomposition(fit.model, fit.state, w.h);
    for (const auto& c : k1) {
      CHECK(c.heterogeneity == Approx(0.0).scale(1.0));
      CHECK(c.sorting.value_or(0.0) == Approx(0.0).scale(1.0));
      CHECK(c.nonlinearities.value_or(0.0) == Approx(0.0).scale(1.0));
    }
  }
  SUBCASE("parallel E-step and parallel restarts are deterministic") {
    const auto w = fixtures::lognormal_world(rng, truth, 80, 3, 150);
    MixtureOptions a;
    a.restarts = 4;
    MixtureOptions b = a;
    b.threads = 3;
    const auto fa = fit_mixture(w.h, a);
    const auto fb = fit_mixture(w.h, b);
    CHECK(fa.state.elbo_trace == fb.state.elbo_trace);
    MixtureOptions c = a;
    c.parallel_estep = true;
    c.threads = 2;
    MixtureOptions d = c;
    d.threads = 4;
    CHECK(fit_mixture(w.h, c).state.elbo_trace == fit_mixture(w.h, d).state.elbo_trace);
  }
  SUBCASE("an unused type is flagged") {
    auto one = truth;
    one.pi = {0.0, 1.0};
    const auto w = fixtures::lognormal_world(rng, one, 300, 5, 900);
    MixtureOptions opt;
    opt.restarts = 3;
    const auto fit = fit_mixture(w.h, opt);
    check_monotone(fit.state);
    // The spare type either loses its mass or duplicates the real one.
    const auto flags = flag_types(fit.model, fit.state);
    CHECK(!flags.empty());
    // A well separated two-type world raises no flag.
    const auto w2 = fixtures::lognormal_world(rng, truth, 300, 5, 900);
    const auto fit2 = fit_mixture(w2.h, opt);
    CHECK(flag_types(fit2.model, fit2.state).empty());
  }
  SUBCASE("errors") {
    MixtureOptions opt;
    CHECK_THROWS_AS(fit_mixture(records_graph({{1, 2, 3}}, {1.0}), opt), DataError);
    CHECK_THROWS_AS(fit_mixture(records_graph({{1}}, {0.0}), opt), DataError);
    opt.restarts = 0;
    CHECK_THROWS_AS(fit_mixture(records_graph({{1}}, {1.0}), opt), DataError);
  }
}

TEST_CASE("posterior matrices") {
  const auto h = records_graph({{1, 2}, {1, 2}, {3, 4}, {1}}, {2.0, 4.0, 6.0, 1.0});
  auto m = MixtureModel::initial(2, Family::lognormal, Variant::independent);
  VariationalState s;
  s.q = Eigen::MatrixXd::Zero(4, 2);
  s.q(0, 0) = s.q(1, 1) = s.q(2, 0) = s.q(3, 1) = 1.0;

  SUBCASE("one-hot, all teams of types (1,2)") {
    const Eigen::MatrixXd M = posterior_type_matrix(m, s, h);
    CHECK(M(0, 1) == Approx(0.5));
    CHECK(M(1, 0) == Approx(0.5));
    CHECK(M(0, 0) == 0.0);
    const auto mo = mean_output_matrix(m, s, h);
    CHECK(mo.value(0, 1) == Approx(4.0));
    CHECK(mo.value(1, 0) == Approx(4.0));
    CHECK(mo.fallback.size() == 2);
    CHECK(mo.value(1, 1) == Approx(implied_mean(m, 1, 1)));
  }
  SUBCASE("uniform posteriors") {
    VariationalState u;
    u.q = Eigen::MatrixXd::Constant(4, 2, 0.5);
    const Eigen::MatrixXd M = posterior_type_matrix(m, u, h);
    CHECK((M.array() - 0.25).abs().maxCoeff() < 1e-15);
    const auto hc = records_graph({{1, 2}, {3, 4}}, {5.0, 5.0});
    const auto mo = mean_output_matrix(m, u, hc);
    CHECK((mo.value.array() - 5.0).abs().maxCoeff() < 1e-12);
  }
  SUBCASE("no pair teams") {
    VariationalState one;
    one.q = Eigen::MatrixXd::Constant(1, 2, 0.5);
    CHECK_THROWS_AS(posterior_type_matrix(m, one, records_graph({{1}}, {1.0})), DataError);
  }
  SUBCASE("assortative data gives a diagonal-dominant matrix") {
    std::mt19937_64 rng(500);
    std::vector<std::vector<int>> teams;
    std::vector<double> y;
    std::uniform_int_distribution<int> pick(0, 49);
    for (int j = 0; j < 300; ++j) {
      const int a = pick(rng);
      int b = pick(rng);
      while (b == a || (a < 25) != (b < 25)) b = pick(rng);
      teams.push_back({a, b});
      y.push_back(1.0);
    }
    const auto ha = records_graph(teams, y);
    VariationalState sa;
    sa.q = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(ha.n_workers()), 2);
    for (WorkerIndex i = 0; i < ha.n_workers(); ++i) {
      const int k = std::stoi(ha.worker(i).id) < 25 ? 0 : 1;
      sa.q(static_cast<Eigen::Index>(i), k) = 0.9;
      sa.q(static_cast<Eigen::Index>(i), 1 - k) = 0.1;
    }
    const Eigen::MatrixXd M = posterior_type_matrix(m, sa, ha);
    CHECK(M(0, 0) + M(1, 1) > 0.75);
  }
}

TEST_CASE("nonlinear variance decomposition") {
  std::mt19937_64 rng(600);
  const auto truth = fixtures::panel_a_truth();
  const auto w = fixtures::lognormal_world(rng, truth, 150, 3, 300);
  VariationalState s;
  s.q = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(w.h.n_workers()), 2);
  for (std::size_t i = 0; i < w.type.size(); ++i) s.q(static_cast<Eigen::Index>(i), w.type[i]) = 1.0;
  auto m = MixtureModel::initial(2, Family::lognormal, Variant::independent);
  m.theta1 = {{0.0, 0.5}, {2.0, 0.5}};

  SUBCASE("mean exactly additive in type effects gives zero nonlinearity") {
    // E[Y|k,k'] = a_k + a_k' with a = (1, 3).
    const double a[] = {1.0, 3.0};
    for (int k = 0; k < 2; ++k)
      for (int kp = 0; kp < 2; ++kp) m.t2(k, kp) = {std::log(a[k] + a[kp]) - 0.25, 0.5};
    const auto c = nonlinear_variance_decomposition(m, s, w.h);
    REQUIRE(c.size() == 2);
    CHECK(std::abs(*c[1].nonlinearities) < 1e-10);
    // Brute-force variance of a_k + a_k' over the observed ordered type pairs.
    std::vector<double> ha, hb;
    for (const auto& t : w.h.teams())
      if (t.size() == 2) {
        const int x = w.type[t.members[0]], y = w.type[t.members[1]];
        ha.push_back(a[x]);
        hb.push_back(a[y]);
        ha.push_back(a[y]);
        hb.push_back(a[x]);
      }
    const double n = static_cast<double>(ha.size());
    const double ma = std::accumulate(ha.begin(), ha.end(), 0.0) / n;
    double va = 0.0, cab = 0.0;
    for (std::size_t r = 0; r < ha.size(); ++r) {
      va += (ha[r] - ma) * (ha[r] - ma) / n;
      cab += (ha[r] - ma) * (hb[r] - ma) / n;
    }
    CHECK(c[1].heterogeneity == Approx(2 * va).epsilon(1e-10));
    CHECK(*c[1].sorting == Approx(2 * cab).epsilon(1e-10).scale(1.0));
  }
  SUBCASE("supermodular means give positive nonlinearity; parts add up") {
    m.theta2 = {{0.0, 0.5}, {1.0, 0.5}, {1.0, 0.5}, {4.0, 0.5}};
    const auto c = nonlinear_variance_decomposition(m, s, w.h);
    CHECK(*c[1].nonlinearities > 0.0);
    const double vg = c[1].total - c[1].other;
    CHECK(vg == Approx(c[1].heterogeneity + *c[1].sorting + *c[1].nonlinearities));
    CHECK(!c[0].sorting);
    CHECK(c[0].total == Approx(c[0].heterogeneity + c[0].other));
    const auto j = to_json(c);
    CHECK(j["sizes"]["1"]["nonlinearities"].is_null());
    CHECK(j["sizes"]["2"]["shares"]["heterogeneity"].get<double>() == Approx(c[1].heterogeneity / c[1].total));
  }
}

TEST_CASE("type proxies") {
  SUBCASE("exact quartiles") {
    std::vector<std::vector<int>> teams;
    std::vector<double> y;
    for (int i = 1; i <= 8; ++i)
      for (int r = 0; r < 5; ++r) {
        teams.push_back({i});
        y.push_back(i);
      }
    teams.push_back({1, 8});
    y.push_back(10.0);
    const auto h = records_graph(teams, y);
    const auto p = type_proxies(h, 4, 5);
    for (int i = 1; i <= 8; ++i) CHECK(p.label[*h.find_worker(std::to_string(i))] == (i - 1) / 2);
    CHECK(p.sorting(0, 3) == Approx(0.5));
    CHECK(p.mean_output(3, 0) == Approx(10.0));
  }
  SUBCASE("ties split by worker id") {
    std::vector<std::vector<int>> teams;
    std::vector<double> y;
    const double means[] = {1, 2, 2, 2, 2, 3, 4, 5};
    for (int i = 0; i < 8; ++i)
      for (int r = 0; r < 5; ++r) {
        teams.push_back({i + 10});
        y.push_back(means[i]);
      }
    const auto h = records_graph(teams, y);
    const auto p = type_proxies(h, 4, 5);
    CHECK(p.label[*h.find_worker("11")] == 0);
    CHECK(p.label[*h.find_worker("12")] == 1);
    CHECK(p.label[*h.find_worker("13")] == 1);
    CHECK(p.label[*h.find_worker("14")] == 2);
  }
  SUBCASE("not enough eligible workers") {
    CHECK_THROWS_AS(type_proxies(records_graph({{1}, {1}, {2}}, {1, 2, 3}), 4, 5), DataError);
  }
}

TEST_CASE("posterior_predict") {
  std::mt19937_64 rng(700);
  const auto truth = fixtures::panel_a_truth();
  const auto w = fixtures::lognormal_world(rng, truth, 300, 4, 900);
  MixtureOptions opt;
  opt.restarts = 2;
  const auto fit = fit_mixture(w.h, opt);

  SUBCASE("same sample reproduces in-sample matrices") {
    const auto p = posterior_predict(fit.model, fit.state, w.h, w.h);
    CHECK(p.sorting == posterior_type_matrix(fit.model, fit.state, w.h));
    CHECK(p.mean_output.value == mean_output_matrix(fit.model, fit.state, w.h).value);
    CHECK(p.teams_dropped == 0);
  }
  SUBCASE("only unseen workers") {
    CHECK_THROWS_AS(posterior_predict(fit.model, fit.state, w.h, records_graph({{9001, 9002}}, {1.0})), DataError);
  }
  SUBCASE("fresh teams of the same workers track the implied means") {
    std::vector<TeamRecord> recs;
    std::normal_distribution<double> z(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> pick(0, w.h.n_workers() - 1);
    for (int j = 0; j < 4000; ++j) {
      const auto a = pick(rng);
      auto b = pick(rng);
      while (b == a) b = pick(rng);
      const int ka = w.type[a], kb = w.type[b];
      const double y = std::exp(truth.mean2(ka, kb) + std::sqrt(truth.var2(ka, kb)) * z(rng));
      recs.push_back({"f" + std::to_string(j), {w.h.worker(a).id, w.h.worker(b).id}, y, std::nullopt, std::nullopt});
    }
    recs.push_back({"unseen", {"99999"}, 1.0, std::nullopt, std::nullopt});
    const auto fut = Hypergraph::from_records(recs);
    const auto p = posterior_predict(fit.model, fit.state, w.h, fut);
    CHECK(p.teams_dropped == 1);
    for (int k = 0; k < 2; ++k)
      for (int kp = 0; kp < 2; ++kp) {
        const double implied = std::exp(truth.mean2(k, kp) + 0.5 * truth.var2(k, kp));
        CHECK(std::abs(p.mean_output.value(k, kp) - implied) < 0.15 * implied);
      }
  }
}

TEST_CASE("model JSON round trip") {
  std::mt19937_64 rng(800);
  for (Variant v : {Variant::independent, Variant::correlated, Variant::joint}) {
    const auto m = random_model(rng, 3, Family::lognormal, v);
    const auto back = mixture_model_from_json(to_json(m));
    CHECK(back.K == 3);
    CHECK(back.variant == v);
    CHECK(back.pi == m.pi);
    CHECK(back.t2(0, 2).mean == m.t2(0, 2).mean);
    if (v == Variant::correlated) CHECK(back.logit_coef == m.logit_coef);
    if (v == Variant::joint) CHECK(back.rho2 == m.rho2);
  }
  CHECK_THROWS_AS(mixture_model_from_json(nlohmann::json::parse(R"({"K": 2})")), DataError);
}
