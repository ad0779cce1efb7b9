#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "teamprod/additive_fe.hpp"
#include "teamprod/hypergraph.hpp"
#include "teamprod/mixture_ve.hpp"

namespace teamprod {

enum class NetworkMode { synthetic, replay, poisson };

/// How the collaboration structure of a replication is formed.
///  synthetic: `workers` workers, `teams_by_size[n-1]` teams of size n. Every worker gets
///    `min_degree` participations plus extras spread with log-normal(0, degree_sigma)
///    propensities; slots are shuffled and cut into teams, with repeated members repaired.
///  replay: the membership of `replay_template`, fresh types/effects and outputs.
///  poisson: mixture truth with joint formation only; solo counts Poisson(rho1(k)) per
///    worker and pair counts Poisson(rho2(k,k')) per unordered worker pair.
struct NetworkSpec {
  NetworkMode mode = NetworkMode::synthetic;
  int workers = 921;
  std::vector<long> teams_by_size = {4554, 893};
  int min_degree = 5;
  double degree_sigma = 1.0;
  /// Share of pair stubs matched within type, in [0,1]; synthetic mixture designs only.
  /// At 1 leftover stubs that cannot be matched within type become solo teams.
  double assortativity = 0.0;
  std::optional<Hypergraph> replay_template;
};

/// y = shift_n + lambda_n * sum alpha + N(0, sigma_n^2), alpha ~ N(alpha_mean, alpha_sd^2)
/// unless `alpha` fixes one value per worker (in worker index order of the network).
struct AdditiveTruth {
  double alpha_mean = 2.0;
  double alpha_sd = 1.0;
  std::vector<double> lambda = {1.0, 0.67, 0.48};
  std::vector<double> sigma = {1.0, 1.0, 1.0};
  std::vector<double> shift = {};
  std::optional<std::vector<double>> alpha;
};

enum class Generator { additive, mixture };

struct SimDesign {
  std::string name;
  Generator generator = Generator::mixture;
  AdditiveTruth additive;
  MixtureModel mixture;
  NetworkSpec network;
  int replications = 100;
  std::uint64_t seed = 1;
};

/// One simulated data set and the latent values behind it, indexed like h's workers.
struct SimDraw {
  Hypergraph h;
  std::vector<int> type;       // mixture designs
  std::vector<double> alpha;   // additive designs
  int replication = 0;
};

/// Throws ConfigError when the design is inconsistent.
void validate(const SimDesign& d);

SimDraw simulate_additive(const SimDesign& d, int replication = 0);
SimDraw simulate_mixture(const SimDesign& d, int replication = 0);
SimDraw simulate(const SimDesign& d, int replication = 0);

/// Built-in designs: panelA2, panelB4 (larger network), panelA2-small, panelB4-small,
/// additive (sizes 1-3, lambda = 1, 0.67, 0.48), additive-types (K=2 log-normal whose
/// expected pair output is additive in type effects). Throws ConfigError on an unknown name.
SimDesign builtin_design(const std::string& name);
std::vector<std::string> builtin_design_names();

NetworkSpec larger_network();
NetworkSpec smaller_network();

struct Estimator {
  std::vector<std::string> names;
  std::vector<double> truth;
  std::function<std::vector<double>(const SimDraw&)> estimate;
};

struct MonteCarloReport {
  std::string design;
  int replications = 0;
  std::vector<std::string> names;
  std::vector<double> truth, mean, sd, p025, p975;
  Eigen::MatrixXd estimates;  // replications x parameters
  std::vector<int> failed;    // replications whose estimator threw
  std::vector<std::string> failures;
};

/// Runs the estimator on every replication (threads > 1 spreads replications over
/// std::thread workers). Quantiles use the nearest-rank convention. Replications whose
/// estimator throws an Error are listed in `failed` and left out of the summaries.
MonteCarloReport run_monte_carlo(const SimDesign& d, const Estimator& est, int threads = 1);

/// Table-style parameter vector of a mixture model: solo means and variances, pair
/// means and variances over k <= k', then proportions of types 1..K-1.
std::vector<std::string> mixture_parameter_names(int K);
std::vector<double> mixture_parameters(const MixtureModel& m);

/// fit_mixture with `opt` on each replication; truth from the design.
Estimator mixture_estimator(const SimDesign& d, const MixtureOptions& opt);
/// Returns the truth on every replication.
Estimator identity_estimator(const SimDesign& d);
/// Nonlinear decomposition of 2-worker teams (total, heterogeneity, sorting,
/// nonlinearities, other) after fit_mixture with `opt`; truth evaluated at the true
/// model with one-hot types on the first replication's network.
Estimator nonlinear_estimator(const SimDesign& d, const MixtureOptions& opt);

/// fit_additive with `opt`: lambda_n for n >= 2, then sigma2_n for every size.
Estimator additive_estimator(const SimDesign& d, const AdditiveOptions& opt);

/// CSV with columns parameter,true,mean,p2.5,p97.5 and 6 significant digits.
std::string to_csv(const MonteCarloReport& r);

}  // namespace teamprod
