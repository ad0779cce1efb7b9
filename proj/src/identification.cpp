#include "teamprod/identification.hpp"

#include <algorithm>
#include <string>

#include <Eigen/SparseQR>

#include "teamprod/error.hpp"

namespace teamprod {

SizeScale SizeScale::ones(const std::vector<int>& sizes) {
  std::map<int, double> m;
  for (int n : sizes) m[n] = 1.0;
  return SizeScale(std::move(m));
}

double SizeScale::at(int n) const {
  const auto it = by_size_.find(n);
  if (it == by_size_.end()) throw DataError("no team-size scale for size " + std::to_string(n));
  return it->second;
}

DesignSystem build_design(const Hypergraph& h, const SizeScale& lambda, const std::vector<TeamIndex>& teams) {
  std::vector<TeamIndex> rows = teams;
  if (rows.empty()) {
    rows.resize(h.n_teams());
    for (TeamIndex j = 0; j < h.n_teams(); ++j) rows[j] = j;
  }
  std::vector<Eigen::Index> col_of(h.n_workers(), -1);
  DesignSystem ds;
  for (TeamIndex j : rows)
    for (WorkerIndex i : h.team(j).members) col_of[i] = 0;
  for (WorkerIndex i = 0; i < h.n_workers(); ++i) {
    if (col_of[i] < 0) continue;
    col_of[i] = static_cast<Eigen::Index>(ds.col_index.size());
    ds.col_index.push_back(i);
  }

  std::vector<Eigen::Triplet<double>> ta, tb;
  ds.row_scale.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const Team& t = h.team(rows[r]);
    const double l = lambda.at(t.size());
    ds.row_scale(static_cast<Eigen::Index>(r)) = l;
    ds.row_size.push_back(t.size());
    ds.row_index.push_back(rows[r]);
    for (WorkerIndex i : t.members) {
      ta.emplace_back(static_cast<Eigen::Index>(r), col_of[i], 1.0);
      tb.emplace_back(static_cast<Eigen::Index>(r), col_of[i], l);
    }
  }
  const auto nr = static_cast<Eigen::Index>(rows.size());
  const auto nc = static_cast<Eigen::Index>(ds.col_index.size());
  ds.A.resize(nr, nc);
  ds.B.resize(nr, nc);
  ds.A.setFromTriplets(ta.begin(), ta.end());
  ds.B.setFromTriplets(tb.begin(), tb.end());
  ds.A.makeCompressed();
  ds.B.makeCompressed();
  ds.lambda = lambda;
  return ds;
}

namespace {

SparseMatrix select(const SparseMatrix& M, const std::vector<Eigen::Index>& rows, const std::vector<Eigen::Index>& cols) {
  std::vector<Eigen::Index> row_pos(static_cast<std::size_t>(M.rows()), -1);
  for (std::size_t r = 0; r < rows.size(); ++r) row_pos[static_cast<std::size_t>(rows[r])] = static_cast<Eigen::Index>(r);
  std::vector<Eigen::Triplet<double>> t;
  for (std::size_t c = 0; c < cols.size(); ++c)
    for (SparseMatrix::InnerIterator it(M, cols[c]); it; ++it) {
      const auto r = row_pos[static_cast<std::size_t>(it.row())];
      if (r >= 0) t.emplace_back(r, static_cast<Eigen::Index>(c), it.value());
    }
  SparseMatrix out(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
  out.setFromTriplets(t.begin(), t.end());
  out.makeCompressed();
  return out;
}

}  // namespace

DesignSystem restrict_design(const DesignSystem& ds, const std::vector<Eigen::Index>& rows,
                             const std::vector<Eigen::Index>& cols) {
  DesignSystem out;
  out.A = select(ds.A, rows, cols);
  out.B = select(ds.B, rows, cols);
  out.row_scale.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    out.row_scale(static_cast<Eigen::Index>(r)) = ds.row_scale(rows[r]);
    out.row_size.push_back(ds.row_size[static_cast<std::size_t>(rows[r])]);
    out.row_index.push_back(ds.row_index[static_cast<std::size_t>(rows[r])]);
  }
  for (auto c : cols) out.col_index.push_back(ds.col_index[static_cast<std::size_t>(c)]);
  out.lambda = ds.lambda;
  return out;
}

std::vector<bool> identified_workers(const SparseMatrix& B, const IdentificationOptions& opt) {
  const Eigen::Index n = B.cols();
  if (n == 0) return {};
  if (B.rows() == 0) return std::vector<bool>(static_cast<std::size_t>(n), false);
  if (!(opt.tol > 0.0)) throw DataError("identified_workers: tol must be positive");

  SparseMatrix Bc = B;
  Bc.makeCompressed();
  Eigen::SparseQR<SparseMatrix, Eigen::COLAMDOrdering<int>> qr;
  qr.compute(Bc);
  const auto diag = [&] {
    return " (" + std::to_string(B.rows()) + "x" + std::to_string(n) + ", nnz=" + std::to_string(B.nonZeros()) + ")";
  };
  if (qr.info() != Eigen::Success) throw EstimationError("identification", "sparse QR failed" + diag());

  const Eigen::Index r = qr.rank();
  std::vector<bool> out(static_cast<std::size_t>(n), true);
  if (r == n) return out;

  // Null space of B in pivoted coordinates is spanned by [-R11^{-1} R12; I].
  const SparseMatrix R = qr.matrixR();
  const SparseMatrix R11 = R.topLeftCorner(r, r);
  const Eigen::MatrixXd R12 = Eigen::MatrixXd(R.block(0, r, r, n - r));
  Eigen::MatrixXd Z(n, n - r);
  if (r > 0) Z.topRows(r) = -R11.triangularView<Eigen::Upper>().solve(R12);
  Z.bottomRows(n - r).setIdentity();
  const Eigen::MatrixXd null_basis = qr.colsPermutation() * Z;

  const double residual = (B * null_basis).cwiseAbs().maxCoeff();
  const double scale = std::max(1.0, null_basis.cwiseAbs().maxCoeff());
  double bmax = 1.0;
  for (Eigen::Index k = 0; k < Bc.outerSize(); ++k)
    for (SparseMatrix::InnerIterator it(Bc, k); it; ++it) bmax = std::max(bmax, std::abs(it.value()));
  if (!(residual <= 1e-8 * scale * bmax))
    throw EstimationError("identification", "null-space basis check failed, residual " + std::to_string(residual) + diag());

  Eigen::HouseholderQR<Eigen::MatrixXd> hq(null_basis);
  const Eigen::MatrixXd Q = hq.householderQ() * Eigen::MatrixXd::Identity(n, n - r);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double rn = Q.row(i).norm();
    if (rn <= opt.tol) continue;  // ||(I-P)e_i||_inf <= ||(I-P)e_i||_2 = rn
    const double inf = (Q * Q.row(i).transpose()).cwiseAbs().maxCoeff();
    out[static_cast<std::size_t>(i)] = inf <= opt.tol;
  }
  return out;
}

IdentifiedSet prune_to_identified(const DesignSystem& ds, const IdentificationOptions& opt) {
  std::vector<Eigen::Index> rows(static_cast<std::size_t>(ds.rows()));
  for (Eigen::Index r = 0; r < ds.rows(); ++r) rows[static_cast<std::size_t>(r)] = r;

  // Incidence lists of the full system, row -> columns.
  const Eigen::SparseMatrix<double, Eigen::RowMajor> Ar = ds.A;
  const auto members = [&](Eigen::Index r) {
    std::vector<Eigen::Index> m;
    for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(Ar, r); it; ++it) m.push_back(it.col());
    return m;
  };
  const auto used_cols = [&](const std::vector<Eigen::Index>& rs) {
    std::vector<bool> used(static_cast<std::size_t>(ds.cols()), false);
    for (auto r : rs)
      for (auto c : members(r)) used[static_cast<std::size_t>(c)] = true;
    std::vector<Eigen::Index> cs;
    for (Eigen::Index c = 0; c < ds.cols(); ++c)
      if (used[static_cast<std::size_t>(c)]) cs.push_back(c);
    return cs;
  };

  IdentifiedSet s;
  std::vector<Eigen::Index> cols = used_cols(rows);
  while (!rows.empty()) {
    ++s.iterations;
    const SparseMatrix sub = select(ds.B, rows, cols);
    const auto flags = identified_workers(sub, opt);
    std::vector<bool> keep_col(static_cast<std::size_t>(ds.cols()), false);
    for (std::size_t c = 0; c < cols.size(); ++c)
      if (flags[c]) keep_col[static_cast<std::size_t>(cols[c])] = true;
    std::vector<Eigen::Index> next_rows;
    for (auto r : rows) {
      const auto m = members(r);
      if (std::all_of(m.begin(), m.end(), [&](Eigen::Index c) { return keep_col[static_cast<std::size_t>(c)]; }))
        next_rows.push_back(r);
    }
    auto next_cols = used_cols(next_rows);
    const bool stable = next_rows == rows && next_cols == cols;
    rows = std::move(next_rows);
    cols = std::move(next_cols);
    if (stable) break;
  }
  if (rows.empty()) cols.clear();
  s.workers = std::move(cols);
  s.teams = std::move(rows);
  return s;
}

nlohmann::json identification_report(const IdentifiedSet& s) {
  return {{"n_workers_kept", s.workers.size()}, {"n_teams_kept", s.teams.size()}, {"iterations", s.iterations}};
}

}  // namespace teamprod
