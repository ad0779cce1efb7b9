#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "additive_world.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"
#include "teamprod/additive_fe.hpp"
#include "teamprod/error.hpp"

using namespace teamprod;
using doctest::Approx;

namespace {

Eigen::VectorXd outputs_of(const Hypergraph& h, const DesignSystem& ds) {
  Eigen::VectorXd y(ds.rows());
  for (Eigen::Index r = 0; r < ds.rows(); ++r) y(r) = h.team(ds.row_index[static_cast<std::size_t>(r)]).output_adj;
  return y;
}

Hypergraph from_lists(const std::vector<std::vector<int>>& teams, const std::vector<double>& y) {
  std::vector<TeamRecord> recs;
  for (std::size_t j = 0; j < teams.size(); ++j) {
    TeamRecord r;
    r.id = "t" + std::to_string(j);
    for (int w : teams[j]) r.worker_ids.push_back(std::to_string(w));
    r.output = y[j];
    recs.push_back(r);
  }
  return Hypergraph::from_records(recs);
}

// Heterogeneity and sorting computed by literally expanding every team into all of
// its member orderings and taking per-position population moments.
std::pair<double, double> brute_force_components(const DesignSystem& ds, const Eigen::VectorXd& alpha, int n, double lambda) {
  std::vector<std::vector<double>> rows;
  const Eigen::SparseMatrix<double, Eigen::RowMajor> Ar = ds.A;
  for (Eigen::Index r = 0; r < ds.rows(); ++r) {
    if (ds.row_size[static_cast<std::size_t>(r)] != n) continue;
    std::vector<double> a;
    for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(Ar, r); it; ++it) a.push_back(alpha(it.col()));
    std::vector<int> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    do {
      std::vector<double> row;
      for (int p : perm) row.push_back(a[static_cast<std::size_t>(p)]);
      rows.push_back(row);
    } while (std::next_permutation(perm.begin(), perm.end()));
  }
  const double R = static_cast<double>(rows.size());
  std::vector<double> mean(static_cast<std::size_t>(n), 0.0);
  for (const auto& row : rows)
    for (int m = 0; m < n; ++m) mean[static_cast<std::size_t>(m)] += row[static_cast<std::size_t>(m)] / R;
  double het = 0.0, sort = 0.0;
  for (int m = 0; m < n; ++m)
    for (int mp = m; mp < n; ++mp) {
      double c = 0.0;
      for (const auto& row : rows)
        c += (row[static_cast<std::size_t>(m)] - mean[static_cast<std::size_t>(m)]) *
             (row[static_cast<std::size_t>(mp)] - mean[static_cast<std::size_t>(mp)]) / R;
      if (m == mp) het += c;
      else sort += 2.0 * c;
    }
  return {lambda * lambda * het, lambda * lambda * sort};
}

// Dense bias trace: Trace(Q Var(alpha_hat)), Var = (B'B)^{-1} B' Omega B (B'B)^{-1}.
double dense_bias_trace(const DesignSystem& ds, const QuadraticForm& Q, const std::map<int, double>& sigma2) {
  const Eigen::MatrixXd B(ds.B);
  const Eigen::MatrixXd S = (B.transpose() * B).inverse();
  Eigen::MatrixXd Qd = Eigen::MatrixXd(Q.P) + Q.rank1 * Q.v * Q.v.transpose();
  Eigen::VectorXd omega(ds.rows());
  for (Eigen::Index r = 0; r < ds.rows(); ++r) omega(r) = sigma2.at(ds.row_size[static_cast<std::size_t>(r)]);
  return (Qd * S * B.transpose() * omega.asDiagonal() * B * S).trace();
}

}  // namespace

TEST_CASE("estimate_lambda on the five-team fixture is not identified") {
  const auto h = fixtures::stylized();
  try {
    estimate_lambda(h);
    FAIL("expected lambda not identified");
  } catch (const EstimationError& e) {
    CHECK(std::string(e.what()).find("lambda not identified") != std::string::npos);
  }
}

TEST_CASE("estimate_lambda exact recovery without noise") {
  std::mt19937_64 rng(1);
  const auto w = fixtures::random_world(rng, 40, 3, 60, 40, 10.0, 2.0);
  const auto h = fixtures::realize(w, {0, 1.0, 0.67, 0.48}, {0, 0, 0, 0}, rng);
  const auto lam = estimate_lambda(h);
  CHECK(lam.at(1) == 1.0);
  CHECK(lam.at(2) == Approx(0.67).epsilon(1e-9));
  CHECK(lam.at(3) == Approx(0.48).epsilon(1e-9));
}

TEST_CASE("estimate_lambda recovers scales from noisy data") {
  std::mt19937_64 rng(2);
  const auto w = fixtures::random_world(rng, 600, 4, 2000, 1200, 10.0, 3.0);
  const auto h = fixtures::realize(w, {0, 1.0, 0.67, 0.48}, {0, 3.0, 3.0, 3.0}, rng);
  const auto lam = estimate_lambda(h);
  CHECK(std::abs(lam.at(2) - 0.67) < 0.02);
  CHECK(std::abs(lam.at(3) - 0.48) < 0.02);
}

TEST_CASE("lambda is scale invariant and alpha scales with output") {
  std::mt19937_64 rng(3);
  const auto w = fixtures::random_world(rng, 60, 3, 80, 120, 10.0, 2.0);
  const auto h = fixtures::realize(w, {0, 1.0, 0.7, 0.5}, {0, 1.0, 1.0, 1.0}, rng);
  std::vector<double> scaled;
  for (const auto& t : h.teams()) scaled.push_back(3.5 * t.output);
  const auto h2 = h.with_outputs(scaled);
  const auto f1 = fit_additive(h);
  const auto f2 = fit_additive(h2);
  for (int n : {2, 3}) CHECK(f2.fit.lambda.at(n) == Approx(f1.fit.lambda.at(n)).epsilon(1e-9));
  CHECK((f2.fit.alpha - 3.5 * f1.fit.alpha).cwiseAbs().maxCoeff() < 1e-8 * f1.fit.alpha.cwiseAbs().maxCoeff());
}

TEST_CASE("estimate_alpha examples") {
  SUBCASE("five-team fixture, exact linear solve") {
    const auto h0 = fixtures::stylized();
    const auto ds = build_design(h0, SizeScale::ones(h0.sizes()));
    Eigen::VectorXd truth(5);
    truth << 1, 2, 3, 4, 5;
    const Eigen::VectorXd y = ds.A * truth;
    const auto f = estimate_alpha(ds, y);
    CHECK((f.alpha - truth).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(f.residuals.cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("all outputs zero") {
    const auto h0 = fixtures::stylized({0, 0, 0, 0, 0});
    const auto ds = build_design(h0, SizeScale::ones(h0.sizes()));
    CHECK(estimate_alpha(ds, outputs_of(h0, ds)).alpha.isZero());
  }
  SUBCASE("solo-only graph gives per-worker means") {
    const auto h = from_lists({{1}, {1}, {2}, {3}, {3}, {3}}, {1, 4, 2, 3, 6, 9});
    const auto ds = build_design(h, SizeScale::ones(h.sizes()));
    const auto f = estimate_alpha(ds, outputs_of(h, ds));
    CHECK(f.alpha(0) == Approx(2.5));
    CHECK(f.alpha(1) == Approx(2.0));
    CHECK(f.alpha(2) == Approx(6.0));
  }
  SUBCASE("rank deficiency is an internal error") {
    const auto h = from_lists({{1, 2}, {1, 2}}, {1, 2});
    const auto ds = build_design(h, SizeScale::ones(h.sizes()));
    CHECK_THROWS_AS(estimate_alpha(ds, outputs_of(h, ds)), EstimationError);
  }
}

TEST_CASE("estimate_sigma2 examples") {
  SUBCASE("two solo teams with outputs 1 and 3") {
    const auto h = from_lists({{1}, {1}}, {1, 3});
    const auto ds = build_design(h, SizeScale::ones(h.sizes()));
    CHECK(estimate_sigma2(ds, outputs_of(h, ds), 1) == Approx(2.0));
  }
  SUBCASE("noise-free data gives zero") {
    std::mt19937_64 rng(4);
    const auto w = fixtures::random_world(rng, 20, 3, 30, 30);
    const auto h = fixtures::realize(w, {0, 1, 0.7, 0.5}, {0, 0, 0, 0}, rng);
    const auto ds = build_design(h, SizeScale({{1, 1}, {2, 0.7}, {3, 0.5}}));
    for (int n : {1, 2, 3}) CHECK(estimate_sigma2(ds, outputs_of(h, ds), n) == Approx(0.0).epsilon(1e-18));
  }
  SUBCASE("saturated block is an error") {
    const auto h = from_lists({{1}, {2}, {1, 2}}, {1, 2, 3});
    const auto ds = build_design(h, SizeScale::ones(h.sizes()));
    CHECK_THROWS_WITH_AS(estimate_sigma2(ds, outputs_of(h, ds), 1), doctest::Contains("sigma2 not estimable"),
                         EstimationError);
  }
  SUBCASE("matches the dense annihilator formula") {
    std::mt19937_64 rng(5);
    for (int rep = 0; rep < 10; ++rep) {
      const auto w = fixtures::random_world(rng, 15, 2, 25, 20, 5.0);
      const auto h = fixtures::realize(w, {0, 1, 0.7, 0.5}, {0, 1, 1, 1}, rng);
      const auto ds = build_design(h, SizeScale::ones(h.sizes()));
      const auto y = outputs_of(h, ds);
      for (int n : {1, 2, 3}) {
        std::vector<Eigen::Index> rows;
        for (Eigen::Index r = 0; r < ds.rows(); ++r)
          if (ds.row_size[static_cast<std::size_t>(r)] == n) rows.push_back(r);
        Eigen::MatrixXd An(static_cast<Eigen::Index>(rows.size()), ds.cols());
        Eigen::VectorXd yn(static_cast<Eigen::Index>(rows.size()));
        const Eigen::MatrixXd A(ds.A);
        for (std::size_t k = 0; k < rows.size(); ++k) {
          An.row(static_cast<Eigen::Index>(k)) = A.row(rows[k]);
          yn(static_cast<Eigen::Index>(k)) = y(rows[k]);
        }
        const Eigen::MatrixXd M = oracles::annihilator(An);
        const double want = yn.dot(M * yn) / M.trace();
        CHECK(estimate_sigma2(ds, y, n) == Approx(want).epsilon(1e-8));
      }
    }
  }
}

TEST_CASE("quadratic forms match the permutation-expanded moments") {
  std::mt19937_64 rng(6);
  for (int rep = 0; rep < 10; ++rep) {
    const auto w = fixtures::random_world(rng, 12, 1, 15, 10);
    const auto h = fixtures::realize(w, {0, 1, 0.7, 0.5}, {0, 1, 1, 1}, rng);
    const auto ds = build_design(h, SizeScale({{1, 1}, {2, 0.7}, {3, 0.5}}));
    Eigen::VectorXd alpha = Eigen::VectorXd::Random(ds.cols());
    for (int n : {1, 2, 3}) {
      const double l = ds.lambda.at(n);
      const auto [het, sort] = brute_force_components(ds, alpha, n, l);
      CHECK(heterogeneity_form(ds, n, l).eval(alpha) == Approx(het).epsilon(1e-10));
      CHECK(sorting_form(ds, n, l).eval(alpha) == Approx(sort).epsilon(1e-10).scale(1.0));
    }
  }
}

TEST_CASE("variance_components") {
  std::mt19937_64 rng(7);
  const auto w = fixtures::random_world(rng, 40, 3, 60, 80, 10.0, 2.0);

  SUBCASE("raw components add up to the total") {
    const auto h = fixtures::realize(w, {0, 1, 0.7, 0.5}, {0, 2, 2, 2}, rng);
    const auto r = fit_additive(h);
    for (int n : {1, 2, 3}) {
      const auto c = variance_components(r.fit, n);
      CHECK(c.total == Approx(c.heterogeneity + c.sorting.value_or(0.0) + c.other).epsilon(1e-12));
      CHECK(c.sorting.has_value() == (n >= 2));
    }
  }
  SUBCASE("equal effects give zero heterogeneity and sorting") {
    auto flat = w;
    std::fill(flat.alpha.begin(), flat.alpha.end(), 3.0);
    const auto h = fixtures::realize(flat, {0, 1, 0.7, 0.5}, {0, 0, 0, 0}, rng);
    const auto ds = build_design(h, SizeScale({{1, 1}, {2, 0.7}, {3, 0.5}}));
    AdditiveFit fit;
    fit.design = ds;
    fit.lambda = ds.lambda;
    fit.y = outputs_of(h, ds);
    fit.alpha = Eigen::VectorXd::Constant(ds.cols(), 3.0);
    for (int n : {1, 2, 3}) {
      const auto c = variance_components(fit, n);
      CHECK(std::abs(c.heterogeneity) < 1e-10);
      CHECK(std::abs(c.sorting.value_or(0.0)) < 1e-10);
    }
  }
  SUBCASE("fewer than two teams of a size is an error") {
    const auto h = from_lists({{1}, {1}, {2}, {2}, {1, 2}}, {1, 2, 3, 4, 5});
    const auto ds = build_design(h, SizeScale::ones(h.sizes()));
    AdditiveFit fit;
    fit.design = ds;
    fit.lambda = ds.lambda;
    fit.y = outputs_of(h, ds);
    fit.alpha = estimate_alpha(ds, fit.y).alpha;
    CHECK_THROWS_AS(variance_components(fit, 2), EstimationError);
  }
}

TEST_CASE("bias traces: exact path, dense oracle and Hutchinson") {
  std::mt19937_64 rng(8);
  const auto w = fixtures::random_world(rng, 25, 3, 40, 25, 10.0, 2.0);
  const auto h = fixtures::realize(w, {0, 1, 0.7, 0.5}, {0, 2, 2, 2}, rng);
  const auto ds = build_design(h, SizeScale({{1, 1}, {2, 0.7}, {3, 0.5}}));
  const std::map<int, double> sigma2 = {{1, 4.0}, {2, 2.0}, {3, 3.0}};
  const BiasSystem sys(ds, sigma2);
  for (int n : {1, 2, 3}) {
    for (const auto& Q : {heterogeneity_form(ds, n, ds.lambda.at(n)), sorting_form(ds, n, ds.lambda.at(n))}) {
      const double dense = dense_bias_trace(ds, Q, sigma2);
      CHECK(sys.exact_trace(Q) == Approx(dense).epsilon(1e-9).scale(1.0));
    }
  }
  SUBCASE("Hutchinson mean converges to the exact trace") {
    const auto Q = heterogeneity_form(ds, 2, 0.7);
    const double exact = sys.exact_trace(Q);
    const double est = sys.hutchinson_trace(Q, 10000, 42);
    CHECK(std::abs(est - exact) / exact < 0.01);
  }
  SUBCASE("Hutchinson does not depend on the thread count") {
    const auto Q = heterogeneity_form(ds, 3, 0.5);
    CHECK(sys.hutchinson_trace(Q, 64, 9, 1) == sys.hutchinson_trace(Q, 64, 9, 3));
  }
  SUBCASE("Q = 0 gives no correction") {
    AdditiveFit fit;
    fit.design = ds;
    fit.sigma2 = sigma2;
    fit.alpha = Eigen::VectorXd::Ones(ds.cols());
    const auto b = bias_correct(fit, QuadraticForm::zero(ds.cols()));
    CHECK(b.raw == 0.0);
    CHECK(b.bias == 0.0);
    CHECK(b.corrected == 0.0);
  }
  SUBCASE("missing sigma2 is an error") {
    CHECK_THROWS_AS(BiasSystem(ds, {{1, 1.0}, {2, 1.0}}), EstimationError);
  }
}

TEST_CASE("plug-in bias equals the trace formula in expectation") {
  // Fixed small design and alpha; only the noise is redrawn.
  std::mt19937_64 rng(9);
  const auto w = fixtures::random_world(rng, 30, 3, 45, 25, 20.0, 2.0);
  const std::vector<double> lam = {0, 1, 0.7, 0.5};
  const std::vector<double> sig = {0, 3.0, 2.0, 2.5};
  const auto h0 = fixtures::realize(w, lam, {0, 0, 0, 0}, rng);
  const auto ds = build_design(h0, SizeScale({{1, 1}, {2, 0.7}, {3, 0.5}}));
  Eigen::VectorXd alpha(ds.cols());
  for (Eigen::Index c = 0; c < ds.cols(); ++c)
    alpha(c) = w.alpha[static_cast<std::size_t>(std::stoi(h0.worker(ds.col_index[static_cast<std::size_t>(c)]).id))];
  const Eigen::VectorXd mean_y = ds.B * alpha;
  const std::map<int, double> sigma2 = {{1, 9.0}, {2, 4.0}, {3, 6.25}};
  const BiasSystem sys(ds, sigma2);

  const int reps = 500;
  std::normal_distribution<double> z(0, 1);
  for (int n : {1, 2, 3}) {
    for (const auto& Q : {heterogeneity_form(ds, n, lam[static_cast<std::size_t>(n)]),
                          sorting_form(ds, n, lam[static_cast<std::size_t>(n)])}) {
      if (Q.is_zero()) continue;
      std::vector<double> est;
      for (int r = 0; r < reps; ++r) {
        Eigen::VectorXd y = mean_y;
        for (Eigen::Index k = 0; k < y.size(); ++k) y(k) += sig[static_cast<std::size_t>(ds.row_size[static_cast<std::size_t>(k)])] * z(rng);
        est.push_back(Q.eval(estimate_alpha(ds, y).alpha));
      }
      const double m = std::accumulate(est.begin(), est.end(), 0.0) / reps;
      double v = 0.0;
      for (double e : est) v += (e - m) * (e - m);
      const double se = std::sqrt(v / (reps - 1) / reps);
      const double bias_mc = m - Q.eval(alpha);
      CHECK(std::abs(bias_mc - sys.exact_trace(Q)) < 3.0 * se);
    }
  }
}

TEST_CASE("shifting every worker effect leaves corrected components unchanged") {
  std::mt19937_64 rng(10);
  const auto w = fixtures::random_world(rng, 40, 3, 60, 80, 10.0, 2.0);
  const auto h = fixtures::realize(w, {0, 1, 0.7, 0.5}, {0, 2, 2, 2}, rng);
  const auto base = fit_additive(h);
  // Adding c to every alpha adds c * lambda_n * n to each size-n output.
  std::vector<double> y;
  for (const auto& t : h.teams()) y.push_back(t.output + 4.0 * base.fit.lambda.at(t.size()) * t.size());
  const auto shifted = fit_additive(h.with_outputs(y));
  for (std::size_t k = 0; k < base.decomposition.by_size.size(); ++k) {
    const auto& a = base.decomposition.by_size[k];
    const auto& b = shifted.decomposition.by_size[k];
    CHECK(b.lambda == Approx(a.lambda).epsilon(1e-9));
    CHECK(b.heterogeneity == Approx(a.heterogeneity).epsilon(1e-7));
    if (a.sorting) CHECK(*b.sorting == Approx(*a.sorting).epsilon(1e-7).scale(1.0));
  }
}

TEST_CASE("fit_additive pipeline") {
  SUBCASE("five-team fixture fails at the lambda stage") {
    try {
      fit_additive(fixtures::stylized());
      FAIL("expected failure");
    } catch (const EstimationError& e) {
      CHECK(e.stage() == "fit_additive/lambda");
    }
  }
  SUBCASE("solo-only graph splits into heterogeneity and sigma2") {
    std::mt19937_64 rng(11);
    const auto w = fixtures::random_world(rng, 30, 4, 0, 0, 5.0, 1.0);
    const auto h = fixtures::realize(w, {0, 1}, {0, 1}, rng);
    const auto r = fit_additive(h);
    REQUIRE(r.decomposition.by_size.size() == 1);
    const auto& s = r.decomposition.by_size[0];
    CHECK(!s.sorting);
    CHECK(s.other == s.sigma2);
    CHECK(s.total == Approx(s.heterogeneity_raw + s.other_raw));
    const auto j = to_json(r.decomposition);
    CHECK(j["sizes"]["1"]["sorting"].is_null());
    CHECK(j["sizes"]["1"]["lambda"] == 1.0);
  }
  SUBCASE("log specification recovers team shifts") {
    std::mt19937_64 rng(12);
    auto w = fixtures::random_world(rng, 800, 4, 2500, 1500, 0.0, 0.5);
    const double mu[] = {0.0, 0.0, -0.20, -0.61};
    std::normal_distribution<double> z(0, 0.6);
    std::vector<TeamRecord> recs;
    for (std::size_t j = 0; j < w.teams.size(); ++j) {
      TeamRecord r;
      r.id = std::to_string(j);
      double s = mu[w.teams[j].size()];
      for (int i : w.teams[j]) {
        r.worker_ids.push_back(std::to_string(i));
        s += w.alpha[static_cast<std::size_t>(i)];
      }
      r.output = std::exp(s + z(rng));
      recs.push_back(r);
    }
    AdditiveOptions opt;
    opt.spec = OutputSpec::logs;
    const auto r = fit_additive(Hypergraph::from_records(recs), opt);
    CHECK(r.fit.mu.at(1) == 0.0);
    CHECK(std::abs(r.fit.mu.at(2) + 0.20) < 0.05);
    CHECK(std::abs(r.fit.mu.at(3) + 0.61) < 0.05);
    CHECK(r.fit.lambda.at(2) == 1.0);
  }
  SUBCASE("log specification rejects zero output") {
    AdditiveOptions opt;
    opt.spec = OutputSpec::logs;
    CHECK_THROWS_AS(fit_additive(fixtures::stylized({0, 1, 1, 1, 1}), opt), EstimationError);
  }
  SUBCASE("ranks specification uses within-year fractional ranks") {
    std::mt19937_64 rng(13);
    const auto w = fixtures::random_world(rng, 40, 3, 60, 80, 10.0, 2.0);
    const auto h = fixtures::realize(w, {0, 1, 0.7, 0.5}, {0, 2, 2, 2}, rng);
    AdditiveOptions opt;
    opt.spec = OutputSpec::ranks;
    const auto r = fit_additive(h, opt);
    CHECK(r.fit.y.minCoeff() >= 0.0);
    CHECK(r.fit.y.maxCoeff() <= 1.0);
  }
  SUBCASE("Hutchinson path is used above the dense threshold") {
    std::mt19937_64 rng(14);
    const auto w = fixtures::random_world(rng, 40, 3, 60, 80, 10.0, 2.0);
    const auto h = fixtures::realize(w, {0, 1, 0.7, 0.5}, {0, 2, 2, 2}, rng);
    AdditiveOptions exact, hutch;
    hutch.bias.exact_max_teams = 10;
    hutch.bias.draws = 4000;
    const auto a = fit_additive(h, exact);
    const auto b = fit_additive(h, hutch);
    CHECK(a.decomposition.exact_trace);
    CHECK(!b.decomposition.exact_trace);
    for (std::size_t k = 0; k < a.decomposition.by_size.size(); ++k) {
      const auto& x = a.decomposition.by_size[k];
      const auto& y = b.decomposition.by_size[k];
      const double bias_x = x.heterogeneity_raw - x.heterogeneity;
      const double bias_y = y.heterogeneity_raw - y.heterogeneity;
      CHECK(std::abs(bias_x - bias_y) < 0.05 * std::abs(bias_x));
    }
  }
}

TEST_CASE("fractional ranks") {
  const auto h = from_lists({{1}, {2}, {3}, {4}}, {5.0, 1.0, 5.0, 3.0});
  const auto r = fractional_ranks_by_year(h);
  CHECK(r[1] == Approx(0.0));
  CHECK(r[3] == Approx(1.0 / 3.0));
  CHECK(r[0] == Approx(5.0 / 6.0));
  CHECK(r[2] == Approx(5.0 / 6.0));
}
