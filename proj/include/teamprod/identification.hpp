#pragma once

#include <map>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "teamprod/hypergraph.hpp"

namespace teamprod {

using SparseMatrix = Eigen::SparseMatrix<double, Eigen::ColMajor>;

/// Team-size scale factors; entry n multiplies the summed effects of n-worker teams.
class SizeScale {
 public:
  SizeScale() = default;
  explicit SizeScale(std::map<int, double> by_size) : by_size_(std::move(by_size)) {}

  static SizeScale ones(const std::vector<int>& sizes);

  double at(int n) const;
  bool has(int n) const { return by_size_.count(n) > 0; }
  void set(int n, double v) { by_size_[n] = v; }
  const std::map<int, double>& values() const { return by_size_; }

 private:
  std::map<int, double> by_size_;
};

/// Stacked incidence system of the additive model: rows are teams, columns workers.
struct DesignSystem {
  SparseMatrix A;                   // 0/1 incidence
  SparseMatrix B;                   // D_lambda * A
  Eigen::VectorXd row_scale;        // lambda of each row's team size
  std::vector<int> row_size;        // team size of each row
  std::vector<TeamIndex> row_index; // team index in the source hypergraph
  std::vector<WorkerIndex> col_index;  // worker index in the source hypergraph
  SizeScale lambda;

  Eigen::Index rows() const { return A.rows(); }
  Eigen::Index cols() const { return A.cols(); }
};

/// Builds the design over the given teams (all teams when `teams` is empty). Only
/// workers appearing in at least one of the teams become columns.
DesignSystem build_design(const Hypergraph& h, const SizeScale& lambda,
                          const std::vector<TeamIndex>& teams = {});

/// Restricts a design to a subset of rows and columns (positions within `ds`).
DesignSystem restrict_design(const DesignSystem& ds, const std::vector<Eigen::Index>& rows,
                             const std::vector<Eigen::Index>& cols);

struct IdentificationOptions {
  double tol = 1e-8;
};

/// Flags the columns j of B whose effect is identified, i.e. e_j lies in the row
/// space of B: ||(I - P_row(B)) e_j||_inf <= tol. The projector complement is built
/// from an orthonormal null-space basis obtained from a rank-revealing sparse QR of
/// B, so no dense pseudo-inverse is ever formed.
std::vector<bool> identified_workers(const SparseMatrix& B, const IdentificationOptions& opt = {});

struct IdentifiedSet {
  std::vector<Eigen::Index> workers;  // column positions in the input design
  std::vector<Eigen::Index> teams;    // row positions in the input design
  int iterations = 0;
};

/// Iterates: keep identified workers, keep teams made only of kept workers,
/// restrict, until nothing changes. An empty result is valid.
IdentifiedSet prune_to_identified(const DesignSystem& ds, const IdentificationOptions& opt = {});

nlohmann::json identification_report(const IdentifiedSet& s);

}  // namespace teamprod
