#include "teamprod/additive_fe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <thread>

#include <Eigen/SparseQR>

#include "teamprod/error.hpp"

namespace teamprod {

std::string to_string(OutputSpec s) {
  switch (s) {
    case OutputSpec::levels: return "levels";
    case OutputSpec::logs: return "logs";
    case OutputSpec::ranks: return "ranks";
  }
  return "levels";
}

OutputSpec output_spec_from_string(const std::string& s) {
  if (s == "levels") return OutputSpec::levels;
  if (s == "logs") return OutputSpec::logs;
  if (s == "ranks") return OutputSpec::ranks;
  throw ConfigError("unknown output spec '" + s + "' (levels|logs|ranks)");
}

// -- quadratic forms ---------------------------------------------------------

QuadraticForm QuadraticForm::zero(Eigen::Index n) {
  QuadraticForm q;
  q.P.resize(n, n);
  q.v = Eigen::VectorXd::Zero(n);
  return q;
}

double QuadraticForm::eval(const Eigen::VectorXd& a) const {
  double s = a.dot(P * a);
  if (rank1 != 0.0) s += rank1 * std::pow(v.dot(a), 2);
  return s;
}

bool QuadraticForm::is_zero() const { return P.nonZeros() == 0 && (rank1 == 0.0 || v.isZero()); }

namespace {

struct SizeBlock {
  std::vector<Eigen::Index> rows;
  SparseMatrix A;  // size-n rows, all design columns
};

SizeBlock size_block(const DesignSystem& ds, int n) {
  SizeBlock b;
  for (Eigen::Index r = 0; r < ds.rows(); ++r)
    if (ds.row_size[static_cast<std::size_t>(r)] == n) b.rows.push_back(r);
  std::vector<Eigen::Index> pos(static_cast<std::size_t>(ds.rows()), -1);
  for (std::size_t k = 0; k < b.rows.size(); ++k) pos[static_cast<std::size_t>(b.rows[k])] = static_cast<Eigen::Index>(k);
  std::vector<Eigen::Triplet<double>> t;
  for (Eigen::Index c = 0; c < ds.A.outerSize(); ++c)
    for (SparseMatrix::InnerIterator it(ds.A, c); it; ++it)
      if (pos[static_cast<std::size_t>(it.row())] >= 0) t.emplace_back(pos[static_cast<std::size_t>(it.row())], c, it.value());
  b.A.resize(static_cast<Eigen::Index>(b.rows.size()), ds.cols());
  b.A.setFromTriplets(t.begin(), t.end());
  b.A.makeCompressed();
  return b;
}

double population_variance(const std::vector<double>& x) {
  if (x.empty()) return 0.0;
  const double m = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
  double s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return s / static_cast<double>(x.size());
}

}  // namespace

QuadraticForm heterogeneity_form(const DesignSystem& ds, int n, double lambda_n) {
  const auto blk = size_block(ds, n);
  const double J = static_cast<double>(blk.rows.size());
  QuadraticForm q = QuadraticForm::zero(ds.cols());
  if (J == 0) return q;
  const Eigen::VectorXd d = Eigen::RowVectorXd::Ones(blk.A.rows()) * blk.A;
  const double l2 = lambda_n * lambda_n;
  std::vector<Eigen::Triplet<double>> t;
  for (Eigen::Index c = 0; c < d.size(); ++c)
    if (d(c) != 0.0) t.emplace_back(c, c, l2 * d(c) / J);
  q.P.setFromTriplets(t.begin(), t.end());
  q.v = d / (n * J);
  q.rank1 = -l2 * n;
  return q;
}

QuadraticForm sorting_form(const DesignSystem& ds, int n, double lambda_n) {
  const auto blk = size_block(ds, n);
  const double J = static_cast<double>(blk.rows.size());
  QuadraticForm q = QuadraticForm::zero(ds.cols());
  if (J == 0 || n < 2) return q;
  const Eigen::VectorXd d = Eigen::RowVectorXd::Ones(blk.A.rows()) * blk.A;
  const double l2 = lambda_n * lambda_n;
  SparseMatrix G = SparseMatrix(blk.A.transpose()) * blk.A;
  for (Eigen::Index c = 0; c < d.size(); ++c) G.coeffRef(c, c) -= d(c);
  G.prune(0.0);
  q.P = (l2 / J) * G;
  q.v = d / (n * J);
  q.rank1 = -l2 * n * (n - 1);
  return q;
}

// -- lambda / mu ---------------------------------------------------------------

namespace {

class Annihilator {
 public:
  explicit Annihilator(const SparseMatrix& A) : A_(A) {
    const SparseMatrix AtA = SparseMatrix(A.transpose()) * A;
    ldlt_.compute(AtA);
    if (ldlt_.info() != Eigen::Success || A.cols() == 0)
      throw EstimationError("annihilator", "A'A is not factorizable; design is not identified");
    const Eigen::VectorXd D = ldlt_.vectorD();
    if (D.minCoeff() <= 1e-12 * std::max(1.0, D.maxCoeff()))
      throw EstimationError("annihilator", "A'A is singular; design is not identified");
  }
  Eigen::VectorXd apply(const Eigen::VectorXd& x) const {
    const Eigen::VectorXd coef = ldlt_.solve(A_.transpose() * x);
    return x - A_ * coef;
  }

 private:
  const SparseMatrix& A_;
  Eigen::SimplicialLDLT<SparseMatrix> ldlt_;
};

std::vector<int> design_sizes(const DesignSystem& ds) {
  std::set<int> s(ds.row_size.begin(), ds.row_size.end());
  return {s.begin(), s.end()};
}

Eigen::VectorXd size_indicator(const DesignSystem& ds, int n) {
  Eigen::VectorXd z = Eigen::VectorXd::Zero(ds.rows());
  for (Eigen::Index r = 0; r < ds.rows(); ++r)
    if (ds.row_size[static_cast<std::size_t>(r)] == n) z(r) = 1.0;
  return z;
}

// Solves G(:, 1:) x = rhs in least squares after checking the normalized system has
// full column rank.
Eigen::VectorXd solve_moment_system(const Eigen::MatrixXd& G, const Eigen::VectorXd& rhs,
                                    const Eigen::VectorXd& row_norm, const Eigen::VectorXd& col_norm,
                                    const std::string& stage, const std::string& what) {
  Eigen::MatrixXd Gn = G;
  Eigen::VectorXd bn = rhs;
  for (Eigen::Index i = 0; i < G.rows(); ++i) {
    const double rs = row_norm(i) > 0 ? row_norm(i) : 1.0;
    Gn.row(i) /= rs;
    bn(i) /= rs;
  }
  for (Eigen::Index j = 0; j < G.cols(); ++j) Gn.col(j) /= (col_norm(j) > 0 ? col_norm(j) : 1.0);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(Gn, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  if (sv.size() == 0 || sv.minCoeff() < 1e-10)
    throw EstimationError(stage, what + " not identified: moment system is singular");
  Eigen::VectorXd x = svd.solve(bn);
  for (Eigen::Index j = 0; j < G.cols(); ++j) x(j) /= (col_norm(j) > 0 ? col_norm(j) : 1.0);
  return x;
}

}  // namespace

SizeScale estimate_lambda(const DesignSystem& ds, const Eigen::VectorXd& y) {
  const auto sizes = design_sizes(ds);
  if (sizes.empty()) throw EstimationError("lambda", "empty design");
  if (sizes.front() != 1) throw EstimationError("lambda", "lambda not identified: no 1-worker teams to normalize lambda_1 = 1");
  if (sizes.size() == 1) return SizeScale({{1, 1.0}});

  const Annihilator M(ds.A);
  const auto S = static_cast<Eigen::Index>(sizes.size());
  std::vector<Eigen::VectorXd> Z, MY;
  for (int n : sizes) {
    Z.push_back(size_indicator(ds, n));
    MY.push_back(M.apply(y.cwiseProduct(Z.back())));
  }
  Eigen::MatrixXd G(S, S);
  Eigen::VectorXd zn(S), yn(S);
  for (Eigen::Index a = 0; a < S; ++a) {
    zn(a) = Z[static_cast<std::size_t>(a)].norm();
    yn(a) = y.cwiseProduct(Z[static_cast<std::size_t>(a)]).norm();
    for (Eigen::Index b = 0; b < S; ++b) G(a, b) = Z[static_cast<std::size_t>(a)].dot(MY[static_cast<std::size_t>(b)]);
  }
  // sum_m c_m G(n, m) = 0 with c_1 = 1 and c_m = 1 / lambda_m.
  const Eigen::VectorXd c = solve_moment_system(G.rightCols(S - 1), -G.col(0), zn, yn.tail(S - 1), "lambda", "lambda");
  SizeScale out({{1, 1.0}});
  for (Eigen::Index k = 0; k < S - 1; ++k) {
    if (!(c(k) > 0.0))
      throw EstimationError("lambda", "lambda not identified: non-positive inverse scale for size " +
                                          std::to_string(sizes[static_cast<std::size_t>(k + 1)]));
    out.set(sizes[static_cast<std::size_t>(k + 1)], 1.0 / c(k));
  }
  return out;
}

SizeScale estimate_lambda(const Hypergraph& h) {
  const auto ds = build_design(h, SizeScale::ones(h.sizes()));
  Eigen::VectorXd y(ds.rows());
  for (Eigen::Index r = 0; r < ds.rows(); ++r) y(r) = h.team(ds.row_index[static_cast<std::size_t>(r)]).output_adj;
  return estimate_lambda(ds, y);
}

std::map<int, double> estimate_mu(const DesignSystem& ds, const Eigen::VectorXd& y) {
  const auto sizes = design_sizes(ds);
  if (sizes.empty()) throw EstimationError("mu", "empty design");
  std::map<int, double> mu;
  for (int n : sizes) mu[n] = 0.0;
  if (sizes.size() == 1) return mu;
  if (sizes.front() != 1) throw EstimationError("mu", "mu not identified: no 1-worker teams to normalize mu_1 = 0");

  const Annihilator M(ds.A);
  const auto S = static_cast<Eigen::Index>(sizes.size());
  std::vector<Eigen::VectorXd> Z, MZ;
  for (int n : sizes) {
    Z.push_back(size_indicator(ds, n));
    MZ.push_back(M.apply(Z.back()));
  }
  const Eigen::VectorXd My = M.apply(y);
  Eigen::MatrixXd G(S, S - 1);
  Eigen::VectorXd rhs(S), zn(S);
  for (Eigen::Index a = 0; a < S; ++a) {
    zn(a) = Z[static_cast<std::size_t>(a)].norm();
    rhs(a) = Z[static_cast<std::size_t>(a)].dot(My);
    for (Eigen::Index b = 1; b < S; ++b) G(a, b - 1) = Z[static_cast<std::size_t>(a)].dot(MZ[static_cast<std::size_t>(b)]);
  }
  const Eigen::VectorXd x = solve_moment_system(G, rhs, zn, zn.tail(S - 1), "mu", "mu");
  for (Eigen::Index k = 1; k < S; ++k) mu[sizes[static_cast<std::size_t>(k)]] = x(k - 1);
  return mu;
}

// -- alpha / sigma2 ------------------------------------------------------------

AlphaFit estimate_alpha(const DesignSystem& ds, const Eigen::VectorXd& y) {
  if (y.size() != ds.rows()) throw DataError("estimate_alpha: output length does not match design rows");
  const SparseMatrix BtB = SparseMatrix(ds.B.transpose()) * ds.B;
  Eigen::SimplicialLDLT<SparseMatrix> ldlt(BtB);
  if (ldlt.info() != Eigen::Success || ds.cols() == 0)
    throw EstimationError("alpha", "B'B factorization failed (pruning contract violated)");
  const Eigen::VectorXd D = ldlt.vectorD();
  if (D.minCoeff() <= 1e-12 * std::max(1.0, D.maxCoeff()))
    throw EstimationError("alpha", "B'B is rank deficient on the pruned system (pruning contract violated)");
  AlphaFit f;
  f.alpha = ldlt.solve(ds.B.transpose() * y);
  f.residuals = y - ds.B * f.alpha;
  return f;
}

double estimate_sigma2(const DesignSystem& ds, const Eigen::VectorXd& y, int n) {
  const auto blk = size_block(ds, n);
  const auto Jn = static_cast<Eigen::Index>(blk.rows.size());
  const std::string msg = "sigma2 not estimable for size " + std::to_string(n);
  if (Jn == 0) throw EstimationError("sigma2", msg + ": no teams");

  // Drop columns unused by the block before factorizing.
  std::vector<Eigen::Index> used;
  for (Eigen::Index c = 0; c < blk.A.outerSize(); ++c)
    if (blk.A.col(c).nonZeros() > 0) used.push_back(c);
  std::vector<Eigen::Triplet<double>> t;
  for (std::size_t k = 0; k < used.size(); ++k)
    for (SparseMatrix::InnerIterator it(blk.A, used[k]); it; ++it) t.emplace_back(it.row(), static_cast<Eigen::Index>(k), 1.0);
  SparseMatrix An(Jn, static_cast<Eigen::Index>(used.size()));
  An.setFromTriplets(t.begin(), t.end());
  An.makeCompressed();

  Eigen::SparseQR<SparseMatrix, Eigen::COLAMDOrdering<int>> qr(An);
  if (qr.info() != Eigen::Success) throw EstimationError("sigma2", msg + ": QR failed");
  const Eigen::Index rank = qr.rank();
  const Eigen::Index dof = Jn - rank;
  if (dof <= 0) throw EstimationError("sigma2", msg + ": zero residual degrees of freedom");

  Eigen::VectorXd yn(Jn);
  for (Eigen::Index k = 0; k < Jn; ++k) yn(k) = y(blk.rows[static_cast<std::size_t>(k)]);
  const Eigen::VectorXd qty = qr.matrixQ().transpose() * yn;
  return std::max(0.0, qty.tail(dof).squaredNorm() / static_cast<double>(dof));
}

std::vector<int> AdditiveFit::sizes() const { return design_sizes(design); }

RawComponents variance_components(const AdditiveFit& fit, int n) {
  const auto& ds = fit.design;
  std::vector<double> yn;
  for (Eigen::Index r = 0; r < ds.rows(); ++r)
    if (ds.row_size[static_cast<std::size_t>(r)] == n) yn.push_back(fit.y(r));
  if (yn.size() < 2)
    throw EstimationError("variance_components", "fewer than 2 teams of size " + std::to_string(n));
  RawComponents c;
  c.n = n;
  c.teams = yn.size();
  c.total = population_variance(yn);
  const double l = fit.lambda.has(n) ? fit.lambda.at(n) : 1.0;
  c.heterogeneity = heterogeneity_form(ds, n, l).eval(fit.alpha);
  if (n >= 2) c.sorting = sorting_form(ds, n, l).eval(fit.alpha);
  c.other = c.total - c.heterogeneity - c.sorting.value_or(0.0);
  return c;
}

// -- bias correction -------------------------------------------------------------

BiasSystem::BiasSystem(const DesignSystem& ds, const std::map<int, double>& sigma2) : B_(ds.B) {
  omega_sqrt_.resize(ds.rows());
  for (Eigen::Index r = 0; r < ds.rows(); ++r) {
    const int n = ds.row_size[static_cast<std::size_t>(r)];
    const auto it = sigma2.find(n);
    if (it == sigma2.end())
      throw EstimationError("bias_correct", "sigma2 unavailable for team size " + std::to_string(n));
    omega_sqrt_(r) = std::sqrt(std::max(0.0, it->second));
  }
  const SparseMatrix BtB = SparseMatrix(B_.transpose()) * B_;
  ldlt_.compute(BtB);
  if (ldlt_.info() != Eigen::Success) throw EstimationError("bias_correct", "B'B factorization failed");
}

Eigen::VectorXd BiasSystem::solve_probe(const Eigen::VectorXd& z) const {
  return ldlt_.solve(B_.transpose() * omega_sqrt_.cwiseProduct(z));
}

double BiasSystem::exact_trace(const QuadraticForm& Q) const {
  if (Q.is_zero()) return 0.0;
  // U = (B'B)^{-1} B' Omega^{1/2}; trace = sum_j u_j' Q u_j.
  const Eigen::MatrixXd Bt = Eigen::MatrixXd(SparseMatrix(B_.transpose())) * omega_sqrt_.asDiagonal();
  const Eigen::MatrixXd U = ldlt_.solve(Bt);
  double tr = (U.array() * (Q.P * U).array()).sum();
  if (Q.rank1 != 0.0) tr += Q.rank1 * (Q.v.transpose() * U).squaredNorm();
  return tr;
}

double BiasSystem::hutchinson_trace(const QuadraticForm& Q, int draws, std::uint64_t seed, int threads) const {
  if (draws < 1) throw DataError("hutchinson_trace: draws must be >= 1");
  if (Q.is_zero()) return 0.0;
  std::vector<double> est(static_cast<std::size_t>(draws));
  const auto run = [&](int begin, int end) {
    Eigen::VectorXd z(B_.rows());
    for (int d = begin; d < end; ++d) {
      std::seed_seq ss{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                       static_cast<std::uint32_t>(d)};
      std::mt19937_64 rng(ss);
      for (Eigen::Index r = 0; r < z.size(); ++r) z(r) = (rng() & 1u) ? 1.0 : -1.0;
      est[static_cast<std::size_t>(d)] = Q.eval(solve_probe(z));
    }
  };
  threads = std::max(1, std::min(threads, draws));
  if (threads == 1) {
    run(0, draws);
  } else {
    std::vector<std::thread> pool;
    const int chunk = (draws + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) pool.emplace_back(run, t * chunk, std::min(draws, (t + 1) * chunk));
    for (auto& th : pool) th.join();
  }
  return std::accumulate(est.begin(), est.end(), 0.0) / draws;
}

BiasCorrection bias_correct(const AdditiveFit& fit, const QuadraticForm& Q, const BiasOptions& opt) {
  BiasCorrection b;
  b.raw = Q.eval(fit.alpha);
  if (Q.is_zero()) return b;
  const BiasSystem sys(fit.design, fit.sigma2);
  b.exact = static_cast<std::size_t>(sys.teams()) <= opt.exact_max_teams;
  b.bias = b.exact ? sys.exact_trace(Q) : sys.hutchinson_trace(Q, opt.draws, opt.seed, opt.threads);
  b.corrected = b.raw - b.bias;
  return b;
}

// -- pipeline ----------------------------------------------------------------------

std::vector<double> fractional_ranks_by_year(const Hypergraph& h) {
  std::map<std::optional<int>, std::vector<TeamIndex>> groups;
  for (TeamIndex j = 0; j < h.n_teams(); ++j) groups[h.team(j).year].push_back(j);
  std::vector<double> out(h.n_teams(), 0.5);
  for (auto& [year, idx] : groups) {
    std::sort(idx.begin(), idx.end(), [&](TeamIndex a, TeamIndex b) { return h.team(a).output_adj < h.team(b).output_adj; });
    const std::size_t n = idx.size();
    if (n == 1) continue;
    std::size_t k = 0;
    while (k < n) {
      std::size_t e = k;
      while (e + 1 < n && h.team(idx[e + 1]).output_adj == h.team(idx[k]).output_adj) ++e;
      const double avg_rank = 0.5 * static_cast<double>(k + e);  // zero-based
      for (std::size_t q = k; q <= e; ++q) out[idx[q]] = avg_rank / static_cast<double>(n - 1);
      k = e + 1;
    }
  }
  return out;
}

nlohmann::json to_json(const VarianceDecomposition& d) {
  nlohmann::json j;
  j["spec"] = to_string(d.spec);
  j["variance_convention"] = "population (denominator J_n)";
  j["bias_trace"] = d.exact_trace ? "exact" : "hutchinson";
  auto& sizes = j["sizes"] = nlohmann::json::object();
  for (const auto& s : d.by_size) {
    nlohmann::json e;
    e["teams"] = s.teams;
    e["total"] = s.total;
    e["heterogeneity"] = s.heterogeneity;
    e["heterogeneity_raw"] = s.heterogeneity_raw;
    e["sorting"] = s.sorting ? nlohmann::json(*s.sorting) : nlohmann::json(nullptr);
    e["sorting_raw"] = s.sorting_raw ? nlohmann::json(*s.sorting_raw) : nlohmann::json(nullptr);
    e["other"] = s.other;
    e["other_raw"] = s.other_raw;
    e["lambda"] = s.lambda;
    e["mu"] = s.mu;
    e["sigma2"] = s.sigma2;
    nlohmann::json shares;
    if (s.total != 0.0) {
      shares["heterogeneity"] = s.heterogeneity / s.total;
      shares["sorting"] = s.sorting ? nlohmann::json(*s.sorting / s.total) : nlohmann::json(nullptr);
      shares["other"] = s.other / s.total;
    }
    e["shares"] = shares;
    e["negative_component"] = s.negative_component;
    sizes[std::to_string(s.n)] = e;
  }
  return j;
}

namespace {

template <class F>
auto stage(const std::string& name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const EstimationError& e) {
    throw EstimationError("fit_additive/" + name, e.message());
  } catch (const DataError& e) {
    throw EstimationError("fit_additive/" + name, e.what());
  }
}

}  // namespace

AdditiveResult fit_additive(const Hypergraph& h, const AdditiveOptions& opt) {
  if (h.n_teams() == 0) throw EstimationError("fit_additive/input", "no teams");

  std::vector<double> dep(h.n_teams());
  for (TeamIndex j = 0; j < h.n_teams(); ++j) dep[j] = h.team(j).output_adj;
  if (opt.spec == OutputSpec::ranks) dep = fractional_ranks_by_year(h);
  if (opt.spec == OutputSpec::logs) {
    for (TeamIndex j = 0; j < h.n_teams(); ++j) {
      if (!(dep[j] > 0.0))
        throw EstimationError("fit_additive/input", "log specification needs positive outputs (team '" + h.team(j).id + "')");
      dep[j] = std::log(dep[j]);
    }
  }

  AdditiveResult res;
  const auto full = build_design(h, SizeScale::ones(h.sizes()));
  res.identified = stage("identification", [&] { return prune_to_identified(full, opt.identification); });
  if (res.identified.teams.empty())
    throw EstimationError("fit_additive/identification", "identified subnetwork is empty");
  DesignSystem ds = restrict_design(full, res.identified.teams, res.identified.workers);

  AdditiveFit& fit = res.fit;
  fit.spec = opt.spec;
  fit.y.resize(ds.rows());
  for (Eigen::Index r = 0; r < ds.rows(); ++r) fit.y(r) = dep[ds.row_index[static_cast<std::size_t>(r)]];

  if (opt.spec == OutputSpec::logs) {
    fit.mu = stage("mu", [&] { return estimate_mu(ds, fit.y); });
    std::vector<int> sz;
    for (const auto& [n, m] : fit.mu) sz.push_back(n);
    fit.lambda = SizeScale::ones(sz);
  } else {
    fit.lambda = stage("lambda", [&] { return estimate_lambda(ds, fit.y); });
    for (const auto& [n, l] : fit.lambda.values()) fit.mu[n] = 0.0;
  }

  // Rebuild with the estimated scales. Scaling rows preserves the row space, so the
  // identified set must be unchanged.
  fit.design = build_design(h, fit.lambda, ds.row_index);
  stage("identification", [&] {
    const auto again = prune_to_identified(fit.design, opt.identification);
    if (static_cast<Eigen::Index>(again.teams.size()) != fit.design.rows() ||
        static_cast<Eigen::Index>(again.workers.size()) != fit.design.cols())
      throw EstimationError("identification", "re-pruning at estimated lambda changed the identified set");
    return 0;
  });

  Eigen::VectorXd y_eff = fit.y;
  for (Eigen::Index r = 0; r < y_eff.size(); ++r) y_eff(r) -= fit.mu.at(fit.design.row_size[static_cast<std::size_t>(r)]);
  const auto af = stage("alpha", [&] { return estimate_alpha(fit.design, y_eff); });
  fit.alpha = af.alpha;
  fit.residuals = af.residuals;

  for (int n : fit.sizes()) fit.sigma2[n] = stage("sigma2", [&] { return estimate_sigma2(fit.design, fit.y, n); });

  auto& dec = res.decomposition;
  dec.spec = opt.spec;
  std::optional<BiasSystem> sys;
  stage("bias_correct", [&] {
    sys.emplace(fit.design, fit.sigma2);
    return 0;
  });
  dec.exact_trace = static_cast<std::size_t>(fit.design.rows()) <= opt.bias.exact_max_teams;
  const auto trace = [&](const QuadraticForm& Q, std::uint64_t salt) {
    return dec.exact_trace ? sys->exact_trace(Q)
                           : sys->hutchinson_trace(Q, opt.bias.draws, opt.bias.seed + salt, opt.bias.threads);
  };

  for (int n : fit.sizes()) {
    const auto raw = stage("variance_components", [&] { return variance_components(fit, n); });
    SizeDecomposition s;
    s.n = n;
    s.teams = raw.teams;
    s.lambda = fit.lambda.at(n);
    s.mu = fit.mu.at(n);
    s.sigma2 = fit.sigma2.at(n);
    s.total = raw.total;
    s.heterogeneity_raw = raw.heterogeneity;
    s.heterogeneity = raw.heterogeneity - trace(heterogeneity_form(fit.design, n, s.lambda), 1000003ull * static_cast<std::uint64_t>(n));
    if (n >= 2) {
      s.sorting_raw = raw.sorting;
      s.sorting = *raw.sorting - trace(sorting_form(fit.design, n, s.lambda), 1000003ull * static_cast<std::uint64_t>(n) + 1);
    }
    s.other_raw = raw.other;
    s.other = s.sigma2;
    s.negative_component = s.heterogeneity < 0.0 || (s.sorting && *s.sorting < 0.0);
    dec.by_size.push_back(s);
  }
  return res;
}

}  // namespace teamprod
