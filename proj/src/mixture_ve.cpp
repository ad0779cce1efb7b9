#include "teamprod/mixture_ve.hpp"

#include <algorithm>
#include <exception>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <thread>

#include <boost/math/tools/minima.hpp>

#include "teamprod/error.hpp"

namespace teamprod {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kRateFloor = 1e-12;
constexpr double kMinDispersion = 1e-6;
constexpr double kMaxDispersion = 1e8;

double xlogy(double x, double logy) { return x == 0.0 ? 0.0 : x * logy; }

double safe_log(double x) { return x > 0.0 ? std::log(x) : kNegInf; }

}  // namespace

std::string to_string(Family f) { return f == Family::lognormal ? "lognormal" : "negbin"; }

std::string to_string(Variant v) {
  switch (v) {
    case Variant::independent: return "independent";
    case Variant::correlated: return "correlated";
    case Variant::joint: return "joint";
  }
  return "independent";
}

Family family_from_string(const std::string& s) {
  if (s == "lognormal") return Family::lognormal;
  if (s == "negbin" || s == "negative-binomial" || s == "negative_binomial") return Family::negbin;
  throw ConfigError("unknown family '" + s + "' (lognormal|negbin)");
}

Variant variant_from_string(const std::string& s) {
  if (s == "independent") return Variant::independent;
  if (s == "correlated") return Variant::correlated;
  if (s == "joint") return Variant::joint;
  throw ConfigError("unknown variant '" + s + "' (independent|correlated|joint)");
}

MixtureModel MixtureModel::initial(int K, Family family, Variant variant) {
  if (K < 1) throw DataError("mixture: K must be >= 1");
  MixtureModel m;
  m.K = K;
  m.family = family;
  m.variant = variant;
  m.pi = Eigen::VectorXd::Constant(K, 1.0 / K);
  m.logit_coef = Eigen::MatrixXd::Zero(K, 5);
  const TypeParams p = family == Family::lognormal ? TypeParams{0.0, 1.0} : TypeParams{1.0, 1.0};
  m.theta1.assign(static_cast<std::size_t>(K), p);
  m.theta2.assign(static_cast<std::size_t>(K * K), p);
  m.rho1 = Eigen::VectorXd::Ones(K);
  m.rho2 = Eigen::MatrixXd::Constant(K, K, 1e-3);
  return m;
}

namespace {

double implied(const MixtureModel& m, const TypeParams& p) {
  return m.family == Family::lognormal ? std::exp(p.mean + 0.5 * p.spread) : p.mean;
}

}  // namespace

double implied_mean(const MixtureModel& m, int k) { return implied(m, m.theta1.at(static_cast<std::size_t>(k))); }

double implied_mean(const MixtureModel& m, int k, int kp) { return implied(m, m.t2(k, kp)); }

double lognormal_logpdf(double y, double mean_log, double var_log) {
  if (!(y > 0.0)) throw DataError("lognormal density needs y > 0, got " + std::to_string(y));
  const double ly = std::log(y);
  return -0.5 * (kLog2Pi + std::log(var_log)) - ly - 0.5 * (ly - mean_log) * (ly - mean_log) / var_log;
}

double negbin_logpmf(double y, double mean, double r) {
  if (!(y >= 0.0) || std::abs(y - std::round(y)) > 1e-9)
    throw DataError("negative binomial needs a nonnegative integer y, got " + std::to_string(y));
  const double n = std::round(y);
  double lg;
  if (n < 64.0) {
    lg = 0.0;
    for (int t = 0; t < static_cast<int>(n); ++t) lg += std::log(r + t);
  } else {
    lg = std::lgamma(n + r) - std::lgamma(r);
  }
  // r ln(r/(r+m)) + y ln(m/(r+m))
  return lg - std::lgamma(n + 1.0) - r * std::log1p(mean / r) + xlogy(n, std::log(mean) - std::log(r + mean));
}

namespace {

double logf(const MixtureModel& m, const TypeParams& p, double y) {
  return m.family == Family::lognormal ? lognormal_logpdf(y, p.mean, p.spread) : negbin_logpmf(y, p.mean, p.spread);
}

}  // namespace

double loglik_team(const MixtureModel& m, int k, double y) { return logf(m, m.theta1.at(static_cast<std::size_t>(k)), y); }

double loglik_team(const MixtureModel& m, int k, int kp, double y) { return logf(m, m.t2(k, kp), y); }

WorkerFeatures worker_features(const Hypergraph& h) {
  WorkerFeatures f;
  const auto N = h.n_workers();
  f.n1.assign(N, 0);
  f.n2.assign(N, 0);
  for (const auto& t : h.teams())
    for (auto i : t.members) {
      if (t.size() == 1) ++f.n1[i];
      if (t.size() == 2) ++f.n2[i];
    }
  f.X.resize(static_cast<Eigen::Index>(N), 5);
  for (std::size_t i = 0; i < N; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    f.X(r, 0) = 1.0;
    f.X(r, 1) = f.n1[i];
    f.X(r, 2) = f.n2[i];
    f.X(r, 3) = f.n1[i] == 0 ? 1.0 : 0.0;
    f.X(r, 4) = f.n2[i] == 0 ? 1.0 : 0.0;
  }
  return f;
}

namespace {

Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& eta) {
  Eigen::MatrixXd p(eta.rows(), eta.cols());
  for (Eigen::Index i = 0; i < eta.rows(); ++i) {
    const double mx = eta.row(i).maxCoeff();
    const Eigen::RowVectorXd e = (eta.row(i).array() - mx).exp();
    p.row(i) = e / e.sum();
  }
  return p;
}

Eigen::MatrixXd log_softmax_rows(const Eigen::MatrixXd& eta) {
  Eigen::MatrixXd p(eta.rows(), eta.cols());
  for (Eigen::Index i = 0; i < eta.rows(); ++i) {
    const double mx = eta.row(i).maxCoeff();
    const double lse = mx + std::log((eta.row(i).array() - mx).exp().sum());
    p.row(i) = eta.row(i).array() - lse;
  }
  return p;
}

// The fitting sample: 1- and 2-worker teams with outputs in the family's support.
struct Sample {
  int N = 0;
  std::vector<int> solo_worker;
  std::vector<double> solo_y;
  std::vector<int> pa, pb;
  std::vector<double> pair_y;
  std::vector<std::vector<int>> solo_of;
  std::vector<std::vector<std::pair<int, int>>> pairs_of;  // (pair index, partner)
  std::vector<int> c1;
  double formation_const = 0.0;  // sum of ln(c!) over solo counts and pair counts
  Eigen::MatrixXd X;
  std::size_t rounded = 0;

  int J1() const { return static_cast<int>(solo_y.size()); }
  int J2() const { return static_cast<int>(pair_y.size()); }
};

Sample make_sample(const Hypergraph& h, Family family) {
  Sample d;
  d.N = static_cast<int>(h.n_workers());
  d.solo_of.resize(h.n_workers());
  d.pairs_of.resize(h.n_workers());
  d.c1.assign(h.n_workers(), 0);
  std::size_t nonpositive = 0;
  std::map<std::pair<int, int>, int> pair_counts;
  for (const auto& t : h.teams()) {
    if (t.size() > 2) throw DataError("mixture models take 1- and 2-worker teams only; team " + t.id + " has " +
                                      std::to_string(t.size()) + " members");
    double y = t.output_adj;
    if (family == Family::negbin) {
      const double r = std::max(0.0, std::round(y));
      if (r != y) ++d.rounded;
      y = r;
    } else if (!(y > 0.0)) {
      ++nonpositive;
      continue;
    }
    if (t.size() == 1) {
      const int i = static_cast<int>(t.members[0]);
      d.solo_of[static_cast<std::size_t>(i)].push_back(d.J1());
      d.solo_worker.push_back(i);
      d.solo_y.push_back(y);
      ++d.c1[static_cast<std::size_t>(i)];
    } else {
      const int a = static_cast<int>(t.members[0]), b = static_cast<int>(t.members[1]);
      d.pairs_of[static_cast<std::size_t>(a)].emplace_back(d.J2(), b);
      d.pairs_of[static_cast<std::size_t>(b)].emplace_back(d.J2(), a);
      d.pa.push_back(a);
      d.pb.push_back(b);
      d.pair_y.push_back(y);
      ++pair_counts[{a, b}];
    }
  }
  if (nonpositive > 0)
    throw DataError("lognormal family needs positive outputs; " + std::to_string(nonpositive) + " teams have y <= 0");
  for (int c : d.c1) d.formation_const += std::lgamma(c + 1.0);
  for (const auto& [k, c] : pair_counts) d.formation_const += std::lgamma(c + 1.0);
  d.X = worker_features(h).X;
  return d;
}

// Weighted NB log-likelihood at mean m over (y, w) pairs, as a function of ln r.
double nb_objective(const std::vector<double>& y, const std::vector<double>& w, double m, double log_r) {
  const double r = std::exp(log_r);
  double s = 0.0;
  for (std::size_t j = 0; j < y.size(); ++j)
    if (w[j] > 0.0) s += w[j] * negbin_logpmf(y[j], m, r);
  return s;
}

struct CellFit {
  bool held = false;
  TypeParams p;
};

// Weighted MLE of one cell. `prev` is returned unchanged when the weight is below `floor`.
CellFit fit_cell(Family family, const std::vector<double>& y, const std::vector<double>& logy,
                 const std::vector<double>& w, const TypeParams& prev, double floor, double var_floor) {
  const double W = std::accumulate(w.begin(), w.end(), 0.0);
  if (!(W >= floor) || W <= 0.0) return {true, prev};
  TypeParams p;
  if (family == Family::lognormal) {
    double m = 0.0;
    for (std::size_t j = 0; j < y.size(); ++j) m += w[j] * logy[j];
    m /= W;
    double v = 0.0;
    for (std::size_t j = 0; j < y.size(); ++j) v += w[j] * (logy[j] - m) * (logy[j] - m);
    p.mean = m;
    p.spread = std::max(v / W, var_floor);
    return {false, p};
  }
  double m = 0.0;
  for (std::size_t j = 0; j < y.size(); ++j) m += w[j] * y[j];
  p.mean = std::max(m / W, 1e-10);
  const auto neg = [&](double lr) { return -nb_objective(y, w, p.mean, lr); };
  const auto best = boost::math::tools::brent_find_minima(neg, std::log(kMinDispersion), std::log(kMaxDispersion), 40);
  const double prev_r = std::clamp(prev.spread, kMinDispersion, kMaxDispersion);
  p.spread = neg(std::log(prev_r)) < best.second ? prev_r : std::exp(best.first);
  return {false, p};
}

class Engine {
 public:
  Engine(const Sample& d, MixtureModel m, Eigen::MatrixXd q) : d_(d), m_(std::move(m)), q_(std::move(q)) {
    const int K = m_.K;
    if (q_.rows() != d_.N || q_.cols() != K)
      throw DataError("variational state has " + std::to_string(q_.rows()) + "x" + std::to_string(q_.cols()) +
                      " entries, expected " + std::to_string(d_.N) + "x" + std::to_string(K));
    for (Eigen::Index i = 0; i < q_.rows(); ++i)
      if (!(q_.row(i).sum() > 0.0) || q_.row(i).minCoeff() < 0.0)
        throw DataError("q row " + std::to_string(i) + " is not a probability vector");
    refresh();
  }

  const MixtureModel& model() const { return m_; }
  MixtureModel& model() { return m_; }
  const Eigen::MatrixXd& q() const { return q_; }

  void refresh() {
    const int K = m_.K;
    if (m_.variant == Variant::correlated) {
      logprior_ = log_softmax_rows(d_.X * m_.logit_coef.transpose());
    } else {
      logprior_.resize(d_.N, K);
      for (int k = 0; k < K; ++k) logprior_.col(k).setConstant(safe_log(m_.pi(k)));
    }
    const bool joint = m_.variant == Variant::joint;
    L1_.resize(d_.J1(), K);
    for (int j = 0; j < d_.J1(); ++j)
      for (int k = 0; k < K; ++k)
        L1_(j, k) = logf(m_, m_.theta1[static_cast<std::size_t>(k)], d_.solo_y[static_cast<std::size_t>(j)]) +
                    (joint ? std::log(std::max(m_.rho1(k), kRateFloor)) : 0.0);
    L2_.resize(d_.J2(), K * K);
    for (int j = 0; j < d_.J2(); ++j)
      for (int k = 0; k < K; ++k)
        for (int kp = k; kp < K; ++kp) {
          const double v = logf(m_, m_.t2(k, kp), d_.pair_y[static_cast<std::size_t>(j)]) +
                           (joint ? std::log(std::max(m_.rho2(k, kp), kRateFloor)) : 0.0);
          L2_(j, k * K + kp) = v;
          L2_(j, kp * K + k) = v;
        }
  }

  double elbo() const {
    const int K = m_.K;
    double s = 0.0;
    for (int j = 0; j < d_.J1(); ++j) s += q_.row(d_.solo_worker[static_cast<std::size_t>(j)]).dot(L1_.row(j));
    for (int j = 0; j < d_.J2(); ++j) {
      const auto a = d_.pa[static_cast<std::size_t>(j)], b = d_.pb[static_cast<std::size_t>(j)];
      for (int k = 0; k < K; ++k) {
        if (q_(a, k) == 0.0) continue;
        double t = 0.0;
        for (int kp = 0; kp < K; ++kp) t += q_(b, kp) * L2_(j, k * K + kp);
        s += q_(a, k) * t;
      }
    }
    for (int i = 0; i < d_.N; ++i)
      for (int k = 0; k < K; ++k) {
        const double qi = q_(i, k);
        if (qi > 0.0) s += qi * (logprior_(i, k) - std::log(qi));
      }
    if (m_.variant == Variant::joint) {
      const Eigen::VectorXd S = q_.colwise().sum().transpose();
      s -= (q_ * m_.rho1).sum();
      const Eigen::MatrixXd QtQ = q_.transpose() * q_;
      s -= 0.5 * (m_.rho2.array() * (S * S.transpose() - QtQ).array()).sum();
      s -= d_.formation_const;
    }
    return s;
  }

  // Coordinate update of worker i; S holds column sums of q without row i.
  Eigen::VectorXd update(int i, const Eigen::MatrixXd& q, const Eigen::VectorXd& S) const {
    const int K = m_.K;
    Eigen::VectorXd s = logprior_.row(i).transpose();
    for (int j : d_.solo_of[static_cast<std::size_t>(i)]) s += L1_.row(j).transpose();
    for (const auto& [j, p] : d_.pairs_of[static_cast<std::size_t>(i)])
      for (int k = 0; k < K; ++k) {
        double t = 0.0;
        for (int kp = 0; kp < K; ++kp) t += q(p, kp) * L2_(j, k * K + kp);
        s(k) += t;
      }
    if (m_.variant == Variant::joint) s -= m_.rho1 + m_.rho2 * S;
    const double mx = s.maxCoeff();
    if (!std::isfinite(mx))
      throw EstimationError("update_q", "all type log-weights are -inf or NaN for worker " + std::to_string(i));
    Eigen::VectorXd out = (s.array() - mx).exp();
    return out / out.sum();
  }

  Eigen::VectorXd update(int i) const {
    Eigen::VectorXd S = q_.colwise().sum().transpose() - q_.row(i).transpose();
    return update(i, q_, S);
  }

  void e_sweep(bool parallel, int threads) {
    if (!parallel) {
      Eigen::VectorXd S = q_.colwise().sum().transpose();
      for (int i = 0; i < d_.N; ++i) {
        S -= q_.row(i).transpose();
        q_.row(i) = update(i, q_, S).transpose();
        S += q_.row(i).transpose();
      }
      return;
    }
    const Eigen::MatrixXd old = q_;
    const Eigen::VectorXd S = old.colwise().sum().transpose();
    const auto run = [&](int begin, int end) {
      for (int i = begin; i < end; ++i) q_.row(i) = update(i, old, S - old.row(i).transpose()).transpose();
    };
    threads = std::max(1, std::min(threads, d_.N));
    std::vector<std::thread> pool;
    const int chunk = (d_.N + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) pool.emplace_back(run, t * chunk, std::min(d_.N, (t + 1) * chunk));
    for (auto& th : pool) th.join();
  }

  void m_step(const MixtureOptions& opt) {
    const int K = m_.K;
    m_.held_types.clear();
    m_.held_pairs.clear();

    if (m_.variant == Variant::correlated) fit_logit(opt.logit_ridge);
    else m_.pi = q_.colwise().mean().transpose();

    std::vector<double> logy1(d_.solo_y.size()), logy2(d_.pair_y.size());
    if (m_.family == Family::lognormal) {
      std::transform(d_.solo_y.begin(), d_.solo_y.end(), logy1.begin(), [](double y) { return std::log(y); });
      std::transform(d_.pair_y.begin(), d_.pair_y.end(), logy2.begin(), [](double y) { return std::log(y); });
    }
    std::vector<double> w(d_.solo_y.size());
    for (int k = 0; k < K; ++k) {
      for (int j = 0; j < d_.J1(); ++j) w[static_cast<std::size_t>(j)] = q_(d_.solo_worker[static_cast<std::size_t>(j)], k);
      const auto c = fit_cell(m_.family, d_.solo_y, logy1, w, m_.theta1[static_cast<std::size_t>(k)],
                              opt.weight_floor * d_.J1(), opt.variance_floor);
      m_.theta1[static_cast<std::size_t>(k)] = c.p;
      if (c.held) m_.held_types.push_back(k);
    }
    w.assign(d_.pair_y.size(), 0.0);
    for (int k = 0; k < K; ++k)
      for (int kp = k; kp < K; ++kp) {
        for (int j = 0; j < d_.J2(); ++j) {
          const auto a = d_.pa[static_cast<std::size_t>(j)], b = d_.pb[static_cast<std::size_t>(j)];
          w[static_cast<std::size_t>(j)] = k == kp ? q_(a, k) * q_(b, k) : q_(a, k) * q_(b, kp) + q_(a, kp) * q_(b, k);
        }
        const auto c = fit_cell(m_.family, d_.pair_y, logy2, w, m_.t2(k, kp), opt.weight_floor * d_.J2(),
                                opt.variance_floor);
        m_.t2(k, kp) = c.p;
        m_.t2(kp, k) = c.p;
        if (c.held) m_.held_pairs.emplace_back(k, kp);
      }

    if (m_.variant == Variant::joint) {
      const Eigen::VectorXd S = q_.colwise().sum().transpose();
      Eigen::VectorXd c1(d_.N);
      for (int i = 0; i < d_.N; ++i) c1(i) = d_.c1[static_cast<std::size_t>(i)];
      const Eigen::VectorXd counts1 = q_.transpose() * c1;
      for (int k = 0; k < K; ++k)
        if (S(k) > 0.0) m_.rho1(k) = std::max(counts1(k) / S(k), kRateFloor);
      Eigen::MatrixXd counts2 = Eigen::MatrixXd::Zero(K, K);
      for (int j = 0; j < d_.J2(); ++j) {
        const auto a = d_.pa[static_cast<std::size_t>(j)], b = d_.pb[static_cast<std::size_t>(j)];
        counts2 += q_.row(a).transpose() * q_.row(b) + q_.row(b).transpose() * q_.row(a);
      }
      // Ordered-pair exposure: sum over i != i' of q_ik q_i'k'.
      const Eigen::MatrixXd exposure = S * S.transpose() - q_.transpose() * q_;
      for (int k = 0; k < K; ++k)
        for (int kp = 0; kp < K; ++kp)
          if (exposure(k, kp) > 0.0) m_.rho2(k, kp) = std::max(counts2(k, kp) / exposure(k, kp), kRateFloor);
      m_.rho2 = 0.5 * (m_.rho2 + m_.rho2.transpose()).eval();
    }
  }

 private:
  // Weighted multinomial logit of q on worker features by damped Newton with a small ridge.
  void fit_logit(double ridge) {
    const int K = m_.K, F = static_cast<int>(d_.X.cols());
    if (K == 1) return;
    const auto objective = [&](const Eigen::MatrixXd& beta) {
      const Eigen::MatrixXd lp = log_softmax_rows(d_.X * beta.transpose());
      double s = 0.0;
      for (int i = 0; i < d_.N; ++i)
        for (int k = 0; k < K; ++k)
          if (q_(i, k) > 0.0) s += q_(i, k) * lp(i, k);
      return s;
    };
    const auto penalized = [&](const Eigen::MatrixXd& beta) { return objective(beta) - 0.5 * ridge * beta.squaredNorm(); };
    Eigen::MatrixXd beta = m_.logit_coef;
    beta.row(0).setZero();
    const Eigen::MatrixXd start = beta;
    double cur = penalized(beta);
    const int P = (K - 1) * F;
    for (int it = 0; it < 50; ++it) {
      const Eigen::MatrixXd p = softmax_rows(d_.X * beta.transpose());
      Eigen::VectorXd g = Eigen::VectorXd::Zero(P);
      Eigen::MatrixXd H = Eigen::MatrixXd::Zero(P, P);
      for (int i = 0; i < d_.N; ++i) {
        const Eigen::RowVectorXd x = d_.X.row(i);
        for (int k = 1; k < K; ++k) {
          g.segment((k - 1) * F, F) += (q_(i, k) - p(i, k)) * x.transpose();
          for (int kp = 1; kp < K; ++kp) {
            const double c = p(i, k) * ((k == kp ? 1.0 : 0.0) - p(i, kp));
            H.block((k - 1) * F, (kp - 1) * F, F, F) += c * x.transpose() * x;
          }
        }
      }
      Eigen::VectorXd theta(P);
      for (int k = 1; k < K; ++k) theta.segment((k - 1) * F, F) = beta.row(k).transpose();
      g -= ridge * theta;
      H.diagonal().array() += ridge;
      const Eigen::VectorXd step = H.ldlt().solve(g);
      double t = 1.0;
      bool moved = false;
      for (int h = 0; h < 30; ++h, t *= 0.5) {
        Eigen::MatrixXd trial = beta;
        for (int k = 1; k < K; ++k) trial.row(k) += t * step.segment((k - 1) * F, F).transpose();
        const double v = penalized(trial);
        if (v >= cur) {
          moved = v - cur > 1e-12 * std::max(1.0, std::abs(cur));
          beta = trial;
          cur = v;
          break;
        }
      }
      if (!moved) break;
    }
    // The ELBO carries no penalty; keep the old coefficients if the fit did not improve it.
    m_.logit_coef = objective(beta) >= objective(start) ? beta : start;
  }

  const Sample& d_;
  MixtureModel m_;
  Eigen::MatrixXd q_;
  Eigen::MatrixXd logprior_;
  Eigen::MatrixXd L1_, L2_;
};

Eigen::MatrixXd checked_q(const VariationalState& s, const Hypergraph& h, int K) {
  if (s.q.rows() != static_cast<Eigen::Index>(h.n_workers()) || s.q.cols() != K)
    throw DataError("variational state does not match the hypergraph and K");
  for (Eigen::Index i = 0; i < s.q.rows(); ++i)
    if (!(s.q.row(i).sum() > 0.0)) throw DataError("q row " + std::to_string(i) + " has zero mass");
  return s.q;
}

}  // namespace

Eigen::MatrixXd prior_matrix(const MixtureModel& m, const Hypergraph& h) {
  if (m.variant == Variant::correlated) return softmax_rows(worker_features(h).X * m.logit_coef.transpose());
  return m.pi.transpose().replicate(static_cast<Eigen::Index>(h.n_workers()), 1);
}

double elbo(const MixtureModel& m, const VariationalState& s, const Hypergraph& h) {
  const Sample d = make_sample(h, m.family);
  return Engine(d, m, checked_q(s, h, m.K)).elbo();
}

Eigen::VectorXd update_q(const MixtureModel& m, const VariationalState& s, const Hypergraph& h, WorkerIndex i) {
  const Sample d = make_sample(h, m.family);
  return Engine(d, m, checked_q(s, h, m.K)).update(static_cast<int>(i));
}

MixtureModel m_step(const MixtureModel& prev, const VariationalState& s, const Hypergraph& h, const MixtureOptions& opt) {
  const Sample d = make_sample(h, prev.family);
  Engine e(d, prev, checked_q(s, h, prev.K));
  e.m_step(opt);
  MixtureModel out = e.model();
  out.rounded_outputs = d.rounded;
  return out;
}

void relabel(MixtureModel& m, VariationalState& s, const std::vector<int>& perm) {
  const int K = m.K;
  if (static_cast<int>(perm.size()) != K) throw DataError("relabel: permutation has wrong length");
  std::vector<int> check = perm;
  std::sort(check.begin(), check.end());
  for (int k = 0; k < K; ++k)
    if (check[static_cast<std::size_t>(k)] != k) throw DataError("relabel: not a permutation");
  MixtureModel o = m;
  for (int t = 0; t < K; ++t) {
    const int a = perm[static_cast<std::size_t>(t)];
    m.pi(t) = o.pi(a);
    m.logit_coef.row(t) = o.logit_coef.row(a) - o.logit_coef.row(perm[0]);
    m.theta1[static_cast<std::size_t>(t)] = o.theta1[static_cast<std::size_t>(a)];
    m.rho1(t) = o.rho1(a);
    for (int u = 0; u < K; ++u) {
      const int b = perm[static_cast<std::size_t>(u)];
      m.t2(t, u) = o.t2(a, b);
      m.rho2(t, u) = o.rho2(a, b);
    }
  }
  std::vector<int> inv(static_cast<std::size_t>(K));
  for (int t = 0; t < K; ++t) inv[static_cast<std::size_t>(perm[static_cast<std::size_t>(t)])] = t;
  for (int& k : m.held_types) k = inv[static_cast<std::size_t>(k)];
  for (auto& [a, b] : m.held_pairs) {
    a = inv[static_cast<std::size_t>(a)];
    b = inv[static_cast<std::size_t>(b)];
    if (a > b) std::swap(a, b);
  }
  const Eigen::MatrixXd q = s.q;
  for (int t = 0; t < K; ++t) s.q.col(t) = q.col(perm[static_cast<std::size_t>(t)]);
}

std::vector<int> canonical_order(const MixtureModel& m) {
  std::vector<int> perm(static_cast<std::size_t>(m.K));
  std::iota(perm.begin(), perm.end(), 0);
  const bool solo = !m.theta1.empty() && m.held_types.size() < static_cast<std::size_t>(m.K);
  const auto key = [&](int k) { return solo ? m.theta1[static_cast<std::size_t>(k)].mean : m.t2(k, k).mean; };
  std::stable_sort(perm.begin(), perm.end(), [&](int a, int b) { return key(a) < key(b); });
  return perm;
}

std::vector<int> negligible_types(const VariationalState& s, double threshold) {
  std::vector<int> out;
  if (s.q.rows() == 0) return out;
  const Eigen::VectorXd mass = s.q.colwise().mean();
  for (Eigen::Index k = 0; k < mass.size(); ++k)
    if (mass(k) < threshold) out.push_back(static_cast<int>(k));
  return out;
}

std::vector<TypeFlag> flag_types(const MixtureModel& m, const VariationalState& s, double mass_threshold,
                                 double min_separation) {
  std::vector<TypeFlag> out;
  for (int k : negligible_types(s, mass_threshold)) out.push_back({k, "negligible mass"});
  const Eigen::VectorXd mass = s.q.rows() ? Eigen::VectorXd(s.q.colwise().mean()) : Eigen::VectorXd::Zero(m.K);
  const bool solo = m.held_types.size() < static_cast<std::size_t>(m.K);
  const auto params = [&](int k) { return solo ? m.theta1[static_cast<std::size_t>(k)] : m.t2(k, k); };
  const auto location_sd = [&](const TypeParams& p) {
    if (m.family == Family::lognormal) return std::make_pair(p.mean, std::sqrt(p.spread));
    return std::make_pair(p.mean, std::sqrt(p.mean + p.mean * p.mean / p.spread));
  };
  for (int a = 0; a < m.K; ++a)
    for (int b = a + 1; b < m.K; ++b) {
      const auto [ma, sa] = location_sd(params(a));
      const auto [mb, sb] = location_sd(params(b));
      const double pooled = std::sqrt(0.5 * (sa * sa + sb * sb));
      if (!(pooled > 0.0) || std::abs(ma - mb) / pooled >= min_separation) continue;
      const int lighter = mass(a) <= mass(b) ? a : b;
      out.push_back({lighter, "indistinct from type " + std::to_string(lighter == a ? b : a)});
    }
  return out;
}

// -- fitting ----------------------------------------------------------------------

TypeProxies type_proxies(const Hypergraph& h, int bins, int threshold) {
  if (bins < 1) throw DataError("type_proxies: bins must be >= 1");
  const auto N = h.n_workers();
  std::vector<double> sum(N, 0.0);
  std::vector<int> count(N, 0);
  for (const auto& t : h.teams())
    if (t.size() == 1) {
      sum[t.members[0]] += t.output_adj;
      ++count[t.members[0]];
    }
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < N; ++i)
    if (count[i] >= threshold && count[i] > 0) eligible.push_back(i);
  if (eligible.size() < static_cast<std::size_t>(bins))
    throw DataError("type_proxies: " + std::to_string(eligible.size()) + " workers with >= " + std::to_string(threshold) +
                    " solo teams, need at least " + std::to_string(bins));
  // Workers are stored in id order, so the index is the id tie-break.
  std::stable_sort(eligible.begin(), eligible.end(),
                   [&](std::size_t a, std::size_t b) { return sum[a] / count[a] < sum[b] / count[b]; });
  TypeProxies p;
  p.bins = bins;
  p.label.assign(N, -1);
  const std::size_t M = eligible.size();
  for (std::size_t r = 0; r < M; ++r) p.label[eligible[r]] = static_cast<int>(r * static_cast<std::size_t>(bins) / M);
  p.counts = Eigen::MatrixXd::Zero(bins, bins);
  Eigen::MatrixXd ysum = Eigen::MatrixXd::Zero(bins, bins);
  for (const auto& t : h.teams()) {
    if (t.size() != 2) continue;
    const int a = p.label[t.members[0]], b = p.label[t.members[1]];
    if (a < 0 || b < 0) continue;
    p.counts(a, b) += 0.5;
    p.counts(b, a) += 0.5;
    ysum(a, b) += 0.5 * t.output_adj;
    ysum(b, a) += 0.5 * t.output_adj;
  }
  const double total = p.counts.sum();
  p.sorting = total > 0.0 ? Eigen::MatrixXd(p.counts / total) : Eigen::MatrixXd::Zero(bins, bins);
  p.mean_output = Eigen::MatrixXd::Zero(bins, bins);
  for (int a = 0; a < bins; ++a)
    for (int b = 0; b < bins; ++b)
      if (p.counts(a, b) > 0.0) p.mean_output(a, b) = ysum(a, b) / p.counts(a, b);
  return p;
}

namespace {

Eigen::MatrixXd dirichlet_rows(int N, int K, std::mt19937_64& rng) {
  std::exponential_distribution<double> e(1.0);
  Eigen::MatrixXd q(N, K);
  for (int i = 0; i < N; ++i) {
    for (int k = 0; k < K; ++k) q(i, k) = e(rng) + 1e-12;
    q.row(i) /= q.row(i).sum();
  }
  return q;
}

struct RunResult {
  MixtureModel model;
  Eigen::MatrixXd q;
  std::vector<double> trace;
  bool converged = false;
  int iterations = 0;
  int violations = 0;
};

RunResult run_em(const Sample& d, MixtureModel start, Eigen::MatrixXd q0, const MixtureOptions& opt) {
  Engine e(d, std::move(start), std::move(q0));
  e.m_step(opt);
  e.refresh();
  RunResult r;
  double prev = e.elbo();
  const auto slack = [](double v) { return 1e-9 * std::max(1.0, std::abs(v)); };
  for (int it = 1; it <= opt.max_iter; ++it) {
    e.e_sweep(opt.parallel_estep, opt.threads);
    const double after_e = e.elbo();
    if (after_e < prev - slack(prev)) ++r.violations;
    e.m_step(opt);
    e.refresh();
    const double after_m = e.elbo();
    if (after_m < after_e - slack(after_e)) ++r.violations;
    r.trace.push_back(after_m);
    r.iterations = it;
    if (!std::isfinite(after_m)) throw EstimationError("fit_mixture", "ELBO is not finite");
    if (after_m - prev < opt.tol) {
      r.converged = true;
      break;
    }
    prev = after_m;
  }
  r.model = e.model();
  r.q = e.q();
  return r;
}

}  // namespace

MixtureFit fit_mixture(const Hypergraph& h, const MixtureOptions& opt) {
  if (opt.K < 1) throw DataError("fit_mixture: K must be >= 1");
  if (opt.restarts < 1) throw DataError("fit_mixture: restarts must be >= 1");
  if (!(opt.tol > 0.0)) throw DataError("fit_mixture: tol must be positive");
  const Sample d = make_sample(h, opt.family);
  if (d.J1() + d.J2() == 0) throw DataError("fit_mixture: no 1- or 2-worker teams");
  const int K = opt.K;

  std::optional<Eigen::MatrixXd> proxy_q;
  if (opt.proxy_init && K > 1) {
    try {
      const auto p = type_proxies(h, K, opt.proxy_threshold);
      Eigen::MatrixXd q = Eigen::MatrixXd::Constant(d.N, K, 1.0 / K);
      for (int i = 0; i < d.N; ++i) {
        const int l = p.label[static_cast<std::size_t>(i)];
        if (l < 0) continue;
        q.row(i).setConstant(0.2 / K);
        q(i, l) += 0.8;
      }
      proxy_q = q;
    } catch (const DataError&) {
    }
  }

  std::vector<RunResult> runs(static_cast<std::size_t>(opt.restarts));
  const auto start_q = [&](int r) {
    if (r == 0 && proxy_q) return *proxy_q;
    std::seed_seq ss{static_cast<std::uint32_t>(opt.seed), static_cast<std::uint32_t>(opt.seed >> 32),
                     static_cast<std::uint32_t>(r)};
    std::mt19937_64 rng(ss);
    return dirichlet_rows(d.N, K, rng);
  };
  const auto run = [&](int r) {
    runs[static_cast<std::size_t>(r)] =
        run_em(d, MixtureModel::initial(K, opt.family, opt.variant), start_q(r), opt);
  };
  const int threads = opt.parallel_estep ? 1 : std::max(1, std::min(opt.threads, opt.restarts));
  if (threads == 1) {
    for (int r = 0; r < opt.restarts; ++r) run(r);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
    for (int t = 0; t < threads; ++t)
      pool.emplace_back([&, t] {
        try {
          for (int r = t; r < opt.restarts; r += threads) run(r);
        } catch (...) {
          errors[static_cast<std::size_t>(t)] = std::current_exception();
        }
      });
    for (auto& th : pool) th.join();
    for (const auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  int best = 0;
  for (int r = 1; r < opt.restarts; ++r)
    if (runs[static_cast<std::size_t>(r)].trace.back() > runs[static_cast<std::size_t>(best)].trace.back()) best = r;
  auto& b = runs[static_cast<std::size_t>(best)];
  MixtureFit fit;
  fit.model = std::move(b.model);
  fit.model.rounded_outputs = d.rounded;
  fit.state.q = std::move(b.q);
  fit.state.elbo_trace = std::move(b.trace);
  fit.state.converged = b.converged;
  fit.state.iterations = b.iterations;
  fit.state.restarts_used = opt.restarts;
  fit.state.best_restart = best;
  for (const auto& r : runs) fit.state.monotone_violations += r.violations;
  relabel(fit.model, fit.state, canonical_order(fit.model));
  return fit;
}

// -- reports ---------------------------------------------------------------------

namespace {

struct PairObs {
  Eigen::RowVectorXd qa, qb;
  double y;
};

std::vector<PairObs> pair_observations(const Eigen::MatrixXd& q, const Hypergraph& h) {
  std::vector<PairObs> out;
  for (const auto& t : h.teams())
    if (t.size() == 2)
      out.push_back({q.row(static_cast<Eigen::Index>(t.members[0])), q.row(static_cast<Eigen::Index>(t.members[1])),
                     t.output_adj});
  return out;
}

// Symmetrized ordered-cell weights of one team: (qa qb' + qb qa') / 2.
Eigen::MatrixXd cell_weights(const PairObs& o) {
  const Eigen::MatrixXd w = o.qa.transpose() * o.qb;
  return 0.5 * (w + w.transpose());
}

Eigen::MatrixXd sorting_matrix(const std::vector<PairObs>& obs, int K) {
  if (obs.empty()) throw DataError("no 2-worker teams for a type-pair matrix");
  Eigen::MatrixXd M = Eigen::MatrixXd::Zero(K, K);
  for (const auto& o : obs) M += cell_weights(o);
  return M / M.sum();
}

MeanOutputMatrix mean_matrix(const MixtureModel& m, const std::vector<PairObs>& obs) {
  if (obs.empty()) throw DataError("no 2-worker teams for a mean-output matrix");
  const int K = m.K;
  MeanOutputMatrix r;
  r.weight = Eigen::MatrixXd::Zero(K, K);
  Eigen::MatrixXd ys = Eigen::MatrixXd::Zero(K, K);
  for (const auto& o : obs) {
    const Eigen::MatrixXd w = cell_weights(o);
    r.weight += w;
    ys += o.y * w;
  }
  r.value.resize(K, K);
  const double floor = 1e-6 * static_cast<double>(obs.size());
  for (int k = 0; k < K; ++k)
    for (int kp = 0; kp < K; ++kp) {
      if (r.weight(k, kp) >= floor && r.weight(k, kp) > 0.0) {
        r.value(k, kp) = ys(k, kp) / r.weight(k, kp);
      } else {
        r.value(k, kp) = implied_mean(m, k, kp);
        if (k <= kp) r.fallback.emplace_back(k, kp);
      }
    }
  return r;
}

double population_variance(const std::vector<double>& x) {
  if (x.empty()) return 0.0;
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
  double s = 0.0;
  for (double v : x) s += (v - mean) * (v - mean);
  return s / static_cast<double>(x.size());
}

}  // namespace

Eigen::MatrixXd posterior_type_matrix(const MixtureModel& m, const VariationalState& s, const Hypergraph& h) {
  return sorting_matrix(pair_observations(checked_q(s, h, m.K), h), m.K);
}

MeanOutputMatrix mean_output_matrix(const MixtureModel& m, const VariationalState& s, const Hypergraph& h) {
  return mean_matrix(m, pair_observations(checked_q(s, h, m.K), h));
}

std::vector<NonlinearComponents> nonlinear_variance_decomposition(const MixtureModel& m, const VariationalState& s,
                                                                  const Hypergraph& h) {
  const Eigen::MatrixXd q = checked_q(s, h, m.K);
  const int K = m.K;
  std::vector<double> y1, y2;
  Eigen::VectorXd w1 = Eigen::VectorXd::Zero(K);
  Eigen::MatrixXd w2 = Eigen::MatrixXd::Zero(K, K);
  for (const auto& t : h.teams()) {
    if (t.size() == 1) {
      y1.push_back(t.output_adj);
      w1 += q.row(static_cast<Eigen::Index>(t.members[0])).transpose();
    } else if (t.size() == 2) {
      y2.push_back(t.output_adj);
      w2 += cell_weights({q.row(static_cast<Eigen::Index>(t.members[0])), q.row(static_cast<Eigen::Index>(t.members[1])), 0.0});
    }
  }
  std::vector<NonlinearComponents> out;
  if (!y1.empty()) {
    w1 /= static_cast<double>(y1.size());
    Eigen::VectorXd g(K);
    for (int k = 0; k < K; ++k) g(k) = implied_mean(m, k);
    const double mean = w1.dot(g);
    const double vg = w1.dot((g.array() - mean).square().matrix());
    NonlinearComponents c;
    c.n = 1;
    c.teams = y1.size();
    c.total = population_variance(y1);
    c.heterogeneity = vg;
    c.other = c.total - vg;
    out.push_back(c);
  }
  if (!y2.empty()) {
    w2 /= static_cast<double>(y2.size());
    Eigen::MatrixXd g(K, K);
    for (int k = 0; k < K; ++k)
      for (int kp = 0; kp < K; ++kp) g(k, kp) = implied_mean(m, k, kp);
    const double mean = (w2.array() * g.array()).sum();
    const double vg = (w2.array() * (g.array() - mean).square()).sum();
    // Weighted least squares of g(k,k') on c + a_k + a_k' over ordered cells.
    Eigen::MatrixXd X = Eigen::MatrixXd::Zero(K * K, K + 1);
    Eigen::VectorXd yv(K * K), sw(K * K);
    for (int k = 0; k < K; ++k)
      for (int kp = 0; kp < K; ++kp) {
        const int r = k * K + kp;
        X(r, 0) = 1.0;
        X(r, 1 + k) += 1.0;
        X(r, 1 + kp) += 1.0;
        yv(r) = g(k, kp);
        sw(r) = std::sqrt(w2(k, kp));
      }
    const Eigen::VectorXd coef =
        (sw.asDiagonal() * X).completeOrthogonalDecomposition().solve(Eigen::VectorXd(sw.asDiagonal() * yv));
    const Eigen::VectorXd a = coef.tail(K);
    const Eigen::VectorXd marg = w2.rowwise().sum();
    const double am = marg.dot(a);
    const double var_a = marg.dot((a.array() - am).square().matrix());
    double cov = 0.0;
    for (int k = 0; k < K; ++k)
      for (int kp = 0; kp < K; ++kp) cov += w2(k, kp) * (a(k) - am) * (a(kp) - am);
    NonlinearComponents c;
    c.n = 2;
    c.teams = y2.size();
    c.total = population_variance(y2);
    c.heterogeneity = 2.0 * var_a;
    c.sorting = 2.0 * cov;
    c.nonlinearities = vg - c.heterogeneity - *c.sorting;
    c.other = c.total - vg;
    out.push_back(c);
  }
  return out;
}

PosteriorPrediction posterior_predict(const MixtureModel& m, const VariationalState& s, const Hypergraph& fitted,
                                      const Hypergraph& future) {
  const Eigen::MatrixXd q = checked_q(s, fitted, m.K);
  std::vector<std::optional<WorkerIndex>> map(future.n_workers());
  std::size_t overlap = 0;
  for (WorkerIndex i = 0; i < future.n_workers(); ++i) {
    map[i] = fitted.find_worker(future.worker(i).id);
    if (map[i]) ++overlap;
  }
  if (overlap == 0) throw DataError("posterior_predict: no worker of the future sample was in the fitted sample");
  PosteriorPrediction p;
  std::vector<PairObs> obs;
  for (const auto& t : future.teams()) {
    const bool known = std::all_of(t.members.begin(), t.members.end(), [&](WorkerIndex i) { return map[i].has_value(); });
    if (!known) {
      ++p.teams_dropped;
      continue;
    }
    if (t.size() != 2) continue;
    obs.push_back({q.row(static_cast<Eigen::Index>(*map[t.members[0]])), q.row(static_cast<Eigen::Index>(*map[t.members[1]])),
                   t.output_adj});
  }
  p.teams_used = obs.size();
  p.sorting = sorting_matrix(obs, m.K);
  p.mean_output = mean_matrix(m, obs);
  return p;
}

// -- serialization -------------------------------------------------------------------

namespace {

nlohmann::json matrix_json(const Eigen::MatrixXd& M) {
  nlohmann::json j = nlohmann::json::array();
  for (Eigen::Index r = 0; r < M.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < M.cols(); ++c) row.push_back(M(r, c));
    j.push_back(row);
  }
  return j;
}

Eigen::MatrixXd matrix_from_json(const nlohmann::json& j) {
  const auto R = static_cast<Eigen::Index>(j.size());
  const auto C = R ? static_cast<Eigen::Index>(j.at(0).size()) : 0;
  Eigen::MatrixXd M(R, C);
  for (Eigen::Index r = 0; r < R; ++r) {
    if (static_cast<Eigen::Index>(j.at(static_cast<std::size_t>(r)).size()) != C) throw DataError("ragged matrix in JSON");
    for (Eigen::Index c = 0; c < C; ++c) M(r, c) = j.at(static_cast<std::size_t>(r)).at(static_cast<std::size_t>(c)).get<double>();
  }
  return M;
}

}  // namespace

nlohmann::json to_json(const MixtureModel& m) {
  nlohmann::json j;
  j["K"] = m.K;
  j["family"] = to_string(m.family);
  j["variant"] = to_string(m.variant);
  j["spread_meaning"] = m.family == Family::lognormal ? "variance of ln y" : "dispersion r, Var = m + m^2/r";
  j["pi"] = std::vector<double>(m.pi.data(), m.pi.data() + m.pi.size());
  if (m.variant == Variant::correlated) {
    j["logit_coef"] = matrix_json(m.logit_coef);
    j["logit_features"] = {"const", "n1", "n2", "n1_zero", "n2_zero"};
  }
  Eigen::MatrixXd t1(m.K, 2), m2(m.K, m.K), s2(m.K, m.K), e2(m.K, m.K);
  for (int k = 0; k < m.K; ++k) {
    t1(k, 0) = m.theta1[static_cast<std::size_t>(k)].mean;
    t1(k, 1) = m.theta1[static_cast<std::size_t>(k)].spread;
    for (int kp = 0; kp < m.K; ++kp) {
      m2(k, kp) = m.t2(k, kp).mean;
      s2(k, kp) = m.t2(k, kp).spread;
      e2(k, kp) = implied_mean(m, k, kp);
    }
  }
  j["theta1"] = {{"mean", std::vector<double>(t1.col(0).data(), t1.col(0).data() + m.K)},
                 {"spread", std::vector<double>(t1.col(1).data(), t1.col(1).data() + m.K)}};
  j["theta2"] = {{"mean", matrix_json(m2)}, {"spread", matrix_json(s2)}};
  Eigen::VectorXd e1(m.K);
  for (int k = 0; k < m.K; ++k) e1(k) = implied_mean(m, k);
  j["implied_mean"] = {{"solo", std::vector<double>(e1.data(), e1.data() + m.K)}, {"pair", matrix_json(e2)}};
  if (m.variant == Variant::joint)
    j["formation"] = {{"rho1", std::vector<double>(m.rho1.data(), m.rho1.data() + m.K)}, {"rho2", matrix_json(m.rho2)}};
  j["held_types"] = m.held_types;
  nlohmann::json hp = nlohmann::json::array();
  for (const auto& [a, b] : m.held_pairs) hp.push_back({a, b});
  j["held_pairs"] = hp;
  j["rounded_outputs"] = m.rounded_outputs;
  return j;
}

MixtureModel mixture_model_from_json(const nlohmann::json& j) {
  try {
    const int K = j.at("K").get<int>();
    MixtureModel m = MixtureModel::initial(K, family_from_string(j.at("family").get<std::string>()),
                                           variant_from_string(j.at("variant").get<std::string>()));
    const auto pi = j.at("pi").get<std::vector<double>>();
    if (static_cast<int>(pi.size()) != K) throw DataError("pi has wrong length");
    m.pi = Eigen::Map<const Eigen::VectorXd>(pi.data(), K);
    if (j.contains("logit_coef")) m.logit_coef = matrix_from_json(j.at("logit_coef"));
    const auto mean1 = j.at("theta1").at("mean").get<std::vector<double>>();
    const auto spread1 = j.at("theta1").at("spread").get<std::vector<double>>();
    const Eigen::MatrixXd m2 = matrix_from_json(j.at("theta2").at("mean"));
    const Eigen::MatrixXd s2 = matrix_from_json(j.at("theta2").at("spread"));
    if (static_cast<int>(mean1.size()) != K || static_cast<int>(spread1.size()) != K || m2.rows() != K || m2.cols() != K ||
        s2.rows() != K || s2.cols() != K)
      throw DataError("theta dimensions do not match K");
    for (int k = 0; k < K; ++k) {
      m.theta1[static_cast<std::size_t>(k)] = {mean1[static_cast<std::size_t>(k)], spread1[static_cast<std::size_t>(k)]};
      for (int kp = 0; kp < K; ++kp) m.t2(k, kp) = {m2(k, kp), s2(k, kp)};
    }
    if (j.contains("formation")) {
      const auto r1 = j.at("formation").at("rho1").get<std::vector<double>>();
      m.rho1 = Eigen::Map<const Eigen::VectorXd>(r1.data(), static_cast<Eigen::Index>(r1.size()));
      m.rho2 = matrix_from_json(j.at("formation").at("rho2"));
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed mixture model JSON: ") + e.what());
  }
}

nlohmann::json to_json(const std::vector<NonlinearComponents>& comps) {
  nlohmann::json j;
  j["variance_convention"] = "population (denominator J_n); conditional means under q-weights";
  auto& sizes = j["sizes"] = nlohmann::json::object();
  for (const auto& c : comps) {
    nlohmann::json e;
    e["teams"] = c.teams;
    e["total"] = c.total;
    e["heterogeneity"] = c.heterogeneity;
    e["sorting"] = c.sorting ? nlohmann::json(*c.sorting) : nlohmann::json(nullptr);
    e["nonlinearities"] = c.nonlinearities ? nlohmann::json(*c.nonlinearities) : nlohmann::json(nullptr);
    e["other"] = c.other;
    if (c.total != 0.0) {
      e["shares"] = {{"heterogeneity", c.heterogeneity / c.total},
                     {"sorting", c.sorting ? nlohmann::json(*c.sorting / c.total) : nlohmann::json(nullptr)},
                     {"nonlinearities", c.nonlinearities ? nlohmann::json(*c.nonlinearities / c.total) : nlohmann::json(nullptr)},
                     {"other", c.other / c.total}};
    }
    sizes[std::to_string(c.n)] = e;
  }
  return j;
}

}  // namespace teamprod
