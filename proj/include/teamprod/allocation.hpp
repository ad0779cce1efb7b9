#pragma once

#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "teamprod/hypergraph.hpp"
#include "teamprod/mixture_ve.hpp"

namespace teamprod {

struct AllocationProblem {
  int K = 0;
  Eigen::VectorXd mu1;          // expected solo output per type
  Eigen::MatrixXd mu2;          // expected pair output, symmetric
  std::vector<long> T1;         // solo budget per type
  std::vector<long> T2;         // pair-slot budget per type
};

struct AllocationSolution {
  Eigen::VectorXd tau1;
  Eigen::MatrixXd tau2;  // symmetric; (k,k') and (k',k) both hold the number of {k,k'} teams
  double objective = 0.0;
  double lp_bound = 0.0;
  bool integral = true;  // the LP vertex itself was integral
  int simplex_pivots = 0;
};

/// Maximizes sum tau1*mu1 + sum_{k<=k'} tau2*mu2 subject to tau1_k <= T1_k and
/// 2 tau2_kk + sum_{k' != k} tau2_kk' <= T2_k. The LP relaxation is solved by a dense
/// simplex with Bland's rule; a fractional vertex is floored and then refilled greedily.
AllocationSolution solve_allocation(const AllocationProblem& p);

/// Pair counts as symmetric proportions (off-diagonal counts split over both cells).
Eigen::MatrixXd allocation_matrix(const AllocationSolution& s);

/// Expected outputs from the fitted type means; budgets from q-weighted participation
/// counts. T1 is rounded to the nearest integer, T2 to the nearest even integer with ties up.
AllocationProblem budgets_from_fit(const MixtureModel& m, const VariationalState& s, const Hypergraph& h);

/// Nearest even integer, ties rounded up.
long nearest_even_up(double x);

/// Objective of an arbitrary allocation.
double allocation_objective(const AllocationProblem& p, const Eigen::VectorXd& tau1, const Eigen::MatrixXd& tau2);

/// True when the allocation meets every budget and is nonnegative and symmetric.
bool allocation_feasible(const AllocationProblem& p, const Eigen::VectorXd& tau1, const Eigen::MatrixXd& tau2,
                         double tol = 1e-9);

nlohmann::json to_json(const AllocationProblem& p);
nlohmann::json to_json(const AllocationSolution& s);

}  // namespace teamprod
