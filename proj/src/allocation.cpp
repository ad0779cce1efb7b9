#include "teamprod/allocation.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "teamprod/error.hpp"

namespace teamprod {

namespace {

constexpr double kEps = 1e-9;

struct LpResult {
  Eigen::VectorXd x;
  double value = 0.0;
  int pivots = 0;
};

// max c'x s.t. Ax <= b, x >= 0, with b >= 0 so the slack basis is feasible.
LpResult simplex_max(const Eigen::MatrixXd& A, const Eigen::VectorXd& b, const Eigen::VectorXd& c) {
  const Eigen::Index m = A.rows(), n = A.cols();
  Eigen::MatrixXd T = Eigen::MatrixXd::Zero(m + 1, n + m + 1);
  T.topLeftCorner(m, n) = A;
  T.block(0, n, m, m).setIdentity();
  T.col(n + m).head(m) = b;
  T.row(m).head(n) = -c.transpose();
  std::vector<Eigen::Index> basis(static_cast<std::size_t>(m));
  for (Eigen::Index r = 0; r < m; ++r) basis[static_cast<std::size_t>(r)] = n + r;

  LpResult res;
  const int max_pivots = 10000;
  while (true) {
    // Bland: smallest index with a negative reduced cost enters.
    Eigen::Index enter = -1;
    for (Eigen::Index j = 0; j < n + m; ++j)
      if (T(m, j) < -kEps) {
        enter = j;
        break;
      }
    if (enter < 0) break;
    Eigen::Index leave = -1;
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index r = 0; r < m; ++r) {
      if (T(r, enter) <= kEps) continue;
      const double ratio = T(r, n + m) / T(r, enter);
      if (ratio < best - kEps ||
          (std::abs(ratio - best) <= kEps && leave >= 0 && basis[static_cast<std::size_t>(r)] < basis[static_cast<std::size_t>(leave)])) {
        best = ratio;
        leave = r;
      }
    }
    if (leave < 0) throw EstimationError("allocation", "linear program is unbounded");
    T.row(leave) /= T(leave, enter);
    for (Eigen::Index r = 0; r <= m; ++r)
      if (r != leave && T(r, enter) != 0.0) T.row(r) -= T(r, enter) * T.row(leave);
    basis[static_cast<std::size_t>(leave)] = enter;
    if (++res.pivots > max_pivots) throw EstimationError("allocation", "simplex did not terminate");
  }
  res.x = Eigen::VectorXd::Zero(n);
  for (Eigen::Index r = 0; r < m; ++r)
    if (basis[static_cast<std::size_t>(r)] < n) res.x(basis[static_cast<std::size_t>(r)]) = T(r, n + m);
  res.value = T(m, n + m);
  return res;
}

struct Layout {
  int K;
  std::vector<std::pair<int, int>> pairs;  // k <= k'
  int n() const { return K + static_cast<int>(pairs.size()); }
};

Layout layout(int K) {
  Layout L{K, {}};
  for (int k = 0; k < K; ++k)
    for (int kp = k; kp < K; ++kp) L.pairs.emplace_back(k, kp);
  return L;
}

void validate(const AllocationProblem& p) {
  const auto K = static_cast<Eigen::Index>(p.K);
  if (p.K < 1) throw DataError("allocation: K must be >= 1");
  if (p.mu1.size() != K || p.mu2.rows() != K || p.mu2.cols() != K || static_cast<int>(p.T1.size()) != p.K ||
      static_cast<int>(p.T2.size()) != p.K)
    throw DataError("allocation: dimensions do not match K");
  if ((p.mu2 - p.mu2.transpose()).cwiseAbs().maxCoeff() > 1e-9 * std::max(1.0, p.mu2.cwiseAbs().maxCoeff()))
    throw DataError("allocation: mu2 must be symmetric");
  for (int k = 0; k < p.K; ++k)
    if (p.T1[static_cast<std::size_t>(k)] < 0 || p.T2[static_cast<std::size_t>(k)] < 0)
      throw DataError("allocation: budgets must be nonnegative");
  if (!p.mu1.allFinite() || !p.mu2.allFinite()) throw DataError("allocation: expected outputs must be finite");
}

// Pair-slot usage of type k by the pair variables x.
double pair_use(const Layout& L, const Eigen::VectorXd& x, int k) {
  double u = 0.0;
  for (std::size_t v = 0; v < L.pairs.size(); ++v) {
    const auto [a, b] = L.pairs[v];
    const double xv = x(L.K + static_cast<Eigen::Index>(v));
    if (a == k && b == k) u += 2.0 * xv;
    else if (a == k || b == k) u += xv;
  }
  return u;
}

}  // namespace

long nearest_even_up(double x) { return 2 * static_cast<long>(std::floor(x / 2.0 + 0.5)); }

double allocation_objective(const AllocationProblem& p, const Eigen::VectorXd& tau1, const Eigen::MatrixXd& tau2) {
  double s = tau1.dot(p.mu1);
  for (int k = 0; k < p.K; ++k)
    for (int kp = k; kp < p.K; ++kp) s += tau2(k, kp) * p.mu2(k, kp);
  return s;
}

bool allocation_feasible(const AllocationProblem& p, const Eigen::VectorXd& tau1, const Eigen::MatrixXd& tau2, double tol) {
  if (tau1.minCoeff() < -tol || tau2.minCoeff() < -tol) return false;
  if ((tau2 - tau2.transpose()).cwiseAbs().maxCoeff() > tol) return false;
  for (int k = 0; k < p.K; ++k) {
    if (tau1(k) > static_cast<double>(p.T1[static_cast<std::size_t>(k)]) + tol) return false;
    const double use = tau2.row(k).sum() + tau2(k, k);
    if (use > static_cast<double>(p.T2[static_cast<std::size_t>(k)]) + tol) return false;
  }
  return true;
}

AllocationSolution solve_allocation(const AllocationProblem& p) {
  validate(p);
  const Layout L = layout(p.K);
  const int n = L.n();
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(2 * p.K, n);
  Eigen::VectorXd b(2 * p.K), c(n);
  for (int k = 0; k < p.K; ++k) {
    A(k, k) = 1.0;
    b(k) = static_cast<double>(p.T1[static_cast<std::size_t>(k)]);
    b(p.K + k) = static_cast<double>(p.T2[static_cast<std::size_t>(k)]);
    c(k) = p.mu1(k);
  }
  for (std::size_t v = 0; v < L.pairs.size(); ++v) {
    const auto [a, bb] = L.pairs[v];
    const auto col = static_cast<Eigen::Index>(p.K) + static_cast<Eigen::Index>(v);
    c(col) = p.mu2(a, bb);
    if (a == bb) A(p.K + a, col) = 2.0;
    else {
      A(p.K + a, col) = 1.0;
      A(p.K + bb, col) = 1.0;
    }
  }
  const LpResult lp = simplex_max(A, b, c);

  AllocationSolution s;
  s.lp_bound = lp.value;
  s.simplex_pivots = lp.pivots;
  Eigen::VectorXd x = lp.x;
  s.integral = ((x.array() - x.array().round()).abs() <= 1e-7).all();
  if (s.integral) {
    x = x.array().round();
  } else {
    // Floor every variable, then add single teams in order of value while budgets allow.
    x = (x.array() + 1e-7).floor();
    while (true) {
      int best = -1;
      for (int v = 0; v < n; ++v) {
        if (!(c(v) > 0.0)) continue;
        bool ok;
        if (v < p.K) {
          ok = x(v) + 1.0 <= b(v) + kEps;
        } else {
          const auto [a, bb] = L.pairs[static_cast<std::size_t>(v - p.K)];
          ok = a == bb ? pair_use(L, x, a) + 2.0 <= b(p.K + a) + kEps
                       : pair_use(L, x, a) + 1.0 <= b(p.K + a) + kEps && pair_use(L, x, bb) + 1.0 <= b(p.K + bb) + kEps;
        }
        if (ok && (best < 0 || c(v) > c(best))) best = v;
      }
      if (best < 0) break;
      x(best) += 1.0;
    }
  }
  s.tau1 = x.head(p.K);
  s.tau2 = Eigen::MatrixXd::Zero(p.K, p.K);
  for (std::size_t v = 0; v < L.pairs.size(); ++v) {
    const auto [a, bb] = L.pairs[v];
    s.tau2(a, bb) = s.tau2(bb, a) = x(p.K + static_cast<Eigen::Index>(v));
  }
  s.objective = allocation_objective(p, s.tau1, s.tau2);
  if (!allocation_feasible(p, s.tau1, s.tau2, 1e-6))
    throw EstimationError("allocation", "internal error: solution violates a budget");
  return s;
}

Eigen::MatrixXd allocation_matrix(const AllocationSolution& s) {
  const auto K = s.tau2.rows();
  double total = 0.0;
  for (Eigen::Index k = 0; k < K; ++k)
    for (Eigen::Index kp = k; kp < K; ++kp) total += s.tau2(k, kp);
  if (!(total > 0.0)) throw DataError("no pair teams allocated");
  Eigen::MatrixXd M(K, K);
  for (Eigen::Index k = 0; k < K; ++k)
    for (Eigen::Index kp = 0; kp < K; ++kp) M(k, kp) = (k == kp ? 1.0 : 0.5) * s.tau2(k, kp) / total;
  return M;
}

AllocationProblem budgets_from_fit(const MixtureModel& m, const VariationalState& s, const Hypergraph& h) {
  if (s.q.rows() != static_cast<Eigen::Index>(h.n_workers()) || s.q.cols() != m.K)
    throw DataError("budgets_from_fit: state does not match the hypergraph and K");
  AllocationProblem p;
  p.K = m.K;
  p.mu1.resize(m.K);
  p.mu2.resize(m.K, m.K);
  for (int k = 0; k < m.K; ++k) {
    p.mu1(k) = implied_mean(m, k);
    for (int kp = 0; kp < m.K; ++kp) p.mu2(k, kp) = implied_mean(m, k, kp);
  }
  Eigen::VectorXd solo = Eigen::VectorXd::Zero(m.K), pair = Eigen::VectorXd::Zero(m.K);
  for (const auto& t : h.teams()) {
    if (t.size() == 1) solo += s.q.row(static_cast<Eigen::Index>(t.members[0])).transpose();
    else if (t.size() == 2)
      for (auto i : t.members) pair += s.q.row(static_cast<Eigen::Index>(i)).transpose();
  }
  for (int k = 0; k < m.K; ++k) {
    p.T1.push_back(std::lround(solo(k)));
    p.T2.push_back(nearest_even_up(pair(k)));
  }
  return p;
}

nlohmann::json to_json(const AllocationProblem& p) {
  nlohmann::json j;
  j["K"] = p.K;
  j["mu1"] = std::vector<double>(p.mu1.data(), p.mu1.data() + p.mu1.size());
  nlohmann::json mu2 = nlohmann::json::array();
  for (int k = 0; k < p.K; ++k) {
    nlohmann::json row = nlohmann::json::array();
    for (int kp = 0; kp < p.K; ++kp) row.push_back(p.mu2(k, kp));
    mu2.push_back(row);
  }
  j["mu2"] = mu2;
  j["T1"] = p.T1;
  j["T2"] = p.T2;
  j["budget_rule"] = "q-weighted participation counts; T1 nearest integer, T2 nearest even (ties up)";
  return j;
}

nlohmann::json to_json(const AllocationSolution& s) {
  nlohmann::json j;
  j["tau1"] = std::vector<double>(s.tau1.data(), s.tau1.data() + s.tau1.size());
  nlohmann::json t2 = nlohmann::json::array();
  for (Eigen::Index k = 0; k < s.tau2.rows(); ++k) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index kp = 0; kp < s.tau2.cols(); ++kp) row.push_back(s.tau2(k, kp));
    t2.push_back(row);
  }
  j["tau2"] = t2;
  j["objective"] = s.objective;
  j["lp_bound"] = s.lp_bound;
  j["integral"] = s.integral;
  j["simplex_pivots"] = s.simplex_pivots;
  return j;
}

}  // namespace teamprod
