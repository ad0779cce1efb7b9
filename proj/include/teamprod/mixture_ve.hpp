#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "teamprod/hypergraph.hpp"

namespace teamprod {

enum class Family { lognormal, negbin };
enum class Variant { independent, correlated, joint };

std::string to_string(Family f);
std::string to_string(Variant v);
Family family_from_string(const std::string& s);
Variant variant_from_string(const std::string& s);

/// Log-normal: `mean` and `spread` are the mean and variance of ln y.
/// Negative binomial: `mean` is E[y] and `spread` the dispersion r, Var = m + m^2/r.
struct TypeParams {
  double mean = 0.0;
  double spread = 1.0;
};

struct MixtureModel {
  int K = 2;
  Family family = Family::lognormal;
  Variant variant = Variant::independent;

  Eigen::VectorXd pi;          // independent and joint RE
  Eigen::MatrixXd logit_coef;  // correlated RE, K x features, row 0 is zero

  std::vector<TypeParams> theta1;  // K
  std::vector<TypeParams> theta2;  // K*K, symmetric, entry (k,k') at k*K+k'

  Eigen::VectorXd rho1;  // joint RE formation rates
  Eigen::MatrixXd rho2;

  std::vector<int> held_types;                    // solo parameters kept at previous values
  std::vector<std::pair<int, int>> held_pairs;    // pair cells kept at previous values, k <= k'
  std::size_t rounded_outputs = 0;                // negative binomial only

  TypeParams& t2(int k, int kp) { return theta2[static_cast<std::size_t>(k * K + kp)]; }
  const TypeParams& t2(int k, int kp) const { return theta2[static_cast<std::size_t>(k * K + kp)]; }

  /// Default starting parameters for K types.
  static MixtureModel initial(int K, Family family, Variant variant);
};

/// Model-implied E[Y | types].
double implied_mean(const MixtureModel& m, int k);
double implied_mean(const MixtureModel& m, int k, int kp);

double lognormal_logpdf(double y, double mean_log, double var_log);
/// y must be a nonnegative integer.
double negbin_logpmf(double y, double mean, double dispersion);

double loglik_team(const MixtureModel& m, int k, double y);
double loglik_team(const MixtureModel& m, int k, int kp, double y);

struct VariationalState {
  Eigen::MatrixXd q;  // workers x K, rows on the simplex
  std::vector<double> elbo_trace;
  bool converged = false;
  int restarts_used = 0;
  int iterations = 0;
  int best_restart = 0;
  int monotone_violations = 0;  // ELBO decreases beyond slack seen while fitting
};

/// Per-worker collaboration features: (1, n1, n2, 1[n1 = 0], 1[n2 = 0]).
struct WorkerFeatures {
  std::vector<int> n1;
  std::vector<int> n2;
  Eigen::MatrixXd X;
};
WorkerFeatures worker_features(const Hypergraph& h);

/// Per-worker prior type probabilities (rows of a workers x K matrix).
Eigen::MatrixXd prior_matrix(const MixtureModel& m, const Hypergraph& h);

struct MixtureOptions {
  int K = 2;
  Family family = Family::lognormal;
  Variant variant = Variant::independent;
  int restarts = 10;
  double tol = 1e-3;
  int max_iter = 2000;
  std::uint64_t seed = 1;
  bool parallel_estep = false;
  int threads = 1;
  double weight_floor = 1e-6;
  double variance_floor = 1e-6;
  int proxy_threshold = 5;
  bool proxy_init = true;
  double logit_ridge = 1e-6;
};

double elbo(const MixtureModel& m, const VariationalState& s, const Hypergraph& h);

/// Closed-form coordinate-ascent update of q_i given the other rows of s.q.
Eigen::VectorXd update_q(const MixtureModel& m, const VariationalState& s, const Hypergraph& h, WorkerIndex i);

/// Weighted maximum likelihood given q. `prev` supplies values for cells below the weight floor.
MixtureModel m_step(const MixtureModel& prev, const VariationalState& s, const Hypergraph& h,
                    const MixtureOptions& opt = {});

/// Applies a type permutation: new type t is old type perm[t].
void relabel(MixtureModel& m, VariationalState& s, const std::vector<int>& perm);

/// Orders types by ascending solo mean (pair-diagonal mean when there are no solo teams).
std::vector<int> canonical_order(const MixtureModel& m);

struct MixtureFit {
  MixtureModel model;
  VariationalState state;
};

/// Variational EM over `opt.restarts` starting points, best ELBO kept, canonical labels.
/// Requires every team of h to have 1 or 2 members.
MixtureFit fit_mixture(const Hypergraph& h, const MixtureOptions& opt = {});

/// Types with mean posterior mass below this are reported as empty.
std::vector<int> negligible_types(const VariationalState& s, double threshold = 1e-3);

struct TypeFlag {
  int type = 0;
  std::string reason;  // "negligible mass" or "indistinct from type <k>"
};
/// Types with negligible mass, plus the lighter member of any two types whose output
/// distributions are not separated (standardized mean gap below `min_separation`).
std::vector<TypeFlag> flag_types(const MixtureModel& m, const VariationalState& s, double mass_threshold = 1e-3,
                                 double min_separation = 0.25);

/// Symmetrized proportions of co-member type pairs over 2-worker teams.
Eigen::MatrixXd posterior_type_matrix(const MixtureModel& m, const VariationalState& s, const Hypergraph& h);

struct MeanOutputMatrix {
  Eigen::MatrixXd value;
  Eigen::MatrixXd weight;
  std::vector<std::pair<int, int>> fallback;  // cells filled with the model-implied mean
};
MeanOutputMatrix mean_output_matrix(const MixtureModel& m, const VariationalState& s, const Hypergraph& h);

struct NonlinearComponents {
  int n = 0;
  std::size_t teams = 0;
  double total = 0.0;
  double heterogeneity = 0.0;
  std::optional<double> sorting;
  std::optional<double> nonlinearities;
  double other = 0.0;
};
std::vector<NonlinearComponents> nonlinear_variance_decomposition(const MixtureModel& m, const VariationalState& s,
                                                                  const Hypergraph& h);

struct TypeProxies {
  int bins = 4;
  std::vector<int> label;  // per worker, -1 when not eligible
  Eigen::MatrixXd sorting;
  Eigen::MatrixXd mean_output;
  Eigen::MatrixXd counts;  // pair teams per cell (symmetrized)
};
TypeProxies type_proxies(const Hypergraph& h, int bins = 4, int threshold = 5);

struct PosteriorPrediction {
  Eigen::MatrixXd sorting;
  MeanOutputMatrix mean_output;
  std::size_t teams_used = 0;
  std::size_t teams_dropped = 0;
};
/// Matrices on `future` with q frozen from the fit on `fitted`; workers are matched by id.
PosteriorPrediction posterior_predict(const MixtureModel& m, const VariationalState& s, const Hypergraph& fitted,
                                      const Hypergraph& future);

nlohmann::json to_json(const MixtureModel& m);
MixtureModel mixture_model_from_json(const nlohmann::json& j);
nlohmann::json to_json(const std::vector<NonlinearComponents>& c);

}  // namespace teamprod
