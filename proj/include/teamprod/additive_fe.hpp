#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include "teamprod/hypergraph.hpp"
#include "teamprod/identification.hpp"

namespace teamprod {

enum class OutputSpec { levels, logs, ranks };

std::string to_string(OutputSpec s);
OutputSpec output_spec_from_string(const std::string& s);

/// alpha' Q alpha with Q = P + rank1 * v v'. P is sparse and symmetric.
struct QuadraticForm {
  SparseMatrix P;
  Eigen::VectorXd v;
  double rank1 = 0.0;

  static QuadraticForm zero(Eigen::Index n);
  double eval(const Eigen::VectorXd& alpha) const;
  bool is_zero() const;
};

/// Heterogeneity form for size-n teams: lambda_n^2 * sum over member positions of
/// the variance of member effects, positions symmetrized, population denominator.
QuadraticForm heterogeneity_form(const DesignSystem& ds, int n, double lambda_n);

/// Sorting form for size-n teams: 2 lambda_n^2 * sum over position pairs of the
/// covariance of member effects, positions symmetrized.
QuadraticForm sorting_form(const DesignSystem& ds, int n, double lambda_n);

/// Team-size scales from the moment conditions Z_n'(I - AA^+) D_lambda^{-1} Y = 0,
/// linear in 1/lambda_n with lambda_1 = 1. `ds` must be an identified design.
/// Throws EstimationError("lambda", "lambda not identified ...") when the moment
/// system is singular.
SizeScale estimate_lambda(const DesignSystem& ds, const Eigen::VectorXd& y);
SizeScale estimate_lambda(const Hypergraph& h);

/// Additive team-size shifts of the log specification, mu_1 = 0.
std::map<int, double> estimate_mu(const DesignSystem& ds, const Eigen::VectorXd& y);

struct AlphaFit {
  Eigen::VectorXd alpha;
  Eigen::VectorXd residuals;
};

/// Least squares alpha = (B'B)^{-1} B'y by sparse Cholesky.
AlphaFit estimate_alpha(const DesignSystem& ds, const Eigen::VectorXd& y);

/// y_n'(I - A_n A_n^+) y_n / Trace(I - A_n A_n^+) over the size-n rows.
double estimate_sigma2(const DesignSystem& ds, const Eigen::VectorXd& y, int n);

struct AdditiveFit {
  OutputSpec spec = OutputSpec::levels;
  SizeScale lambda;
  std::map<int, double> mu;      // zero except in the log specification
  std::map<int, double> sigma2;
  DesignSystem design;           // identified system, B = D_lambda A
  Eigen::VectorXd y;             // dependent variable on the design rows
  Eigen::VectorXd alpha;         // one entry per design column
  Eigen::VectorXd residuals;

  std::vector<int> sizes() const;
};

struct RawComponents {
  int n = 0;
  std::size_t teams = 0;
  double total = 0.0;
  double heterogeneity = 0.0;
  std::optional<double> sorting;  // absent for n = 1
  double other = 0.0;
};

/// Plug-in decomposition of Var_n(y) for size-n teams.
RawComponents variance_components(const AdditiveFit& fit, int n);

struct BiasOptions {
  int draws = 1000;
  std::uint64_t seed = 1;
  std::size_t exact_max_teams = 2000;
  int threads = 1;
};

/// Shared factorization for the bias trace Trace((B'B)^{-1}B'QB(B'B)^{-1} Omega)
/// with Omega = diag(sigma2 of each row's size).
class BiasSystem {
 public:
  BiasSystem(const DesignSystem& ds, const std::map<int, double>& sigma2);

  double exact_trace(const QuadraticForm& Q) const;
  /// Hutchinson estimate with Rademacher probes; draw d uses its own stream
  /// derived from (seed, d) so results do not depend on `threads`.
  double hutchinson_trace(const QuadraticForm& Q, int draws, std::uint64_t seed, int threads = 1) const;

  Eigen::Index teams() const { return B_.rows(); }

 private:
  Eigen::VectorXd solve_probe(const Eigen::VectorXd& z) const;

  SparseMatrix B_;
  Eigen::VectorXd omega_sqrt_;
  Eigen::SimplicialLDLT<SparseMatrix> ldlt_;
};

struct BiasCorrection {
  double raw = 0.0;
  double bias = 0.0;
  double corrected = 0.0;
  bool exact = true;
};

BiasCorrection bias_correct(const AdditiveFit& fit, const QuadraticForm& Q, const BiasOptions& opt = {});

struct SizeDecomposition {
  int n = 0;
  std::size_t teams = 0;
  double lambda = 1.0;
  double mu = 0.0;
  double sigma2 = 0.0;
  double total = 0.0;
  double heterogeneity = 0.0;
  double heterogeneity_raw = 0.0;
  std::optional<double> sorting;
  std::optional<double> sorting_raw;
  double other = 0.0;
  double other_raw = 0.0;
  bool negative_component = false;  // a corrected component came out below zero
};

struct VarianceDecomposition {
  OutputSpec spec = OutputSpec::levels;
  bool exact_trace = true;
  std::vector<SizeDecomposition> by_size;
};

nlohmann::json to_json(const VarianceDecomposition& d);

struct AdditiveOptions {
  OutputSpec spec = OutputSpec::levels;
  IdentificationOptions identification;
  BiasOptions bias;
};

struct AdditiveResult {
  AdditiveFit fit;
  VarianceDecomposition decomposition;
  IdentifiedSet identified;
};

/// Full additive pipeline: prune at unit scales, estimate lambda (or mu for logs),
/// rebuild B, estimate alpha and sigma2, decompose and bias-correct per size.
/// Errors are rethrown as EstimationError labeled with the failing stage.
AdditiveResult fit_additive(const Hypergraph& h, const AdditiveOptions& opt = {});

/// Within-year fractional ranks in [0,1] (ties get their average rank).
std::vector<double> fractional_ranks_by_year(const Hypergraph& h);

}  // namespace teamprod
