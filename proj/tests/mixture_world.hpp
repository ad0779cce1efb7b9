#pragma once

// Small typed worlds for mixture tests, generated without the simulate module.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "teamprod/hypergraph.hpp"

namespace fixtures {

struct TypedWorld {
  std::vector<int> type;
  teamprod::Hypergraph h;
};

struct LognormalTruth {
  std::vector<double> pi;
  std::vector<double> mean1, var1;
  Eigen::MatrixXd mean2, var2;
};

inline TypedWorld lognormal_world(std::mt19937_64& rng, const LognormalTruth& t, int N, int solo_per_worker, int J2) {
  TypedWorld w;
  std::discrete_distribution<int> pick(t.pi.begin(), t.pi.end());
  for (int i = 0; i < N; ++i) w.type.push_back(pick(rng));
  std::normal_distribution<double> z(0.0, 1.0);
  std::uniform_int_distribution<int> any(0, N - 1);
  std::vector<teamprod::TeamRecord> recs;
  int j = 0;
  for (int i = 0; i < N; ++i)
    for (int s = 0; s < solo_per_worker; ++s) {
      const int k = w.type[static_cast<std::size_t>(i)];
      const double y = std::exp(t.mean1[static_cast<std::size_t>(k)] + std::sqrt(t.var1[static_cast<std::size_t>(k)]) * z(rng));
      recs.push_back({"t" + std::to_string(j++), {std::to_string(i)}, y, std::nullopt, std::nullopt});
    }
  for (int p = 0; p < J2; ++p) {
    int a = any(rng), b = any(rng);
    while (b == a) b = any(rng);
    const int ka = w.type[static_cast<std::size_t>(a)], kb = w.type[static_cast<std::size_t>(b)];
    const double y = std::exp(t.mean2(ka, kb) + std::sqrt(t.var2(ka, kb)) * z(rng));
    recs.push_back({"t" + std::to_string(j++), {std::to_string(a), std::to_string(b)}, y, std::nullopt, std::nullopt});
  }
  w.h = teamprod::Hypergraph::from_records(recs);
  // Records were keyed by worker number; map types onto the hypergraph's worker order.
  std::vector<int> by_index(w.h.n_workers());
  for (std::size_t i = 0; i < w.h.n_workers(); ++i)
    by_index[i] = w.type[static_cast<std::size_t>(std::stoi(w.h.worker(i).id))];
  w.type = by_index;
  return w;
}

inline LognormalTruth panel_a_truth() {
  LognormalTruth t;
  t.pi = {0.6, 0.4};
  t.mean1 = {0.0, 2.0};
  t.var1 = {0.5, 0.5};
  t.mean2 = Eigen::MatrixXd(2, 2);
  t.mean2 << 0.0, 1.0, 1.0, 4.0;
  t.var2 = Eigen::MatrixXd::Constant(2, 2, 0.5);
  return t;
}

}  // namespace fixtures
