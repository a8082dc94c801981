/**
 * @file support.hpp
 * @brief Hand-rolled random generators and a dense joint-Gaussian oracle for
 *        linear-Gaussian state-space chains, shared by the unit tests and the
 *        acceptance binary.
 */
#pragma once

#include "rodeo/inference.hpp"
#include "rodeo/kalman.hpp"
#include "rodeo/prior.hpp"
#include "rodeo/solver.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace rodeo::testing {

// ---------------------------------------------------------------------------
// Generators

struct Gen {
  std::mt19937_64 eng;
  explicit Gen(std::uint64_t seed) : eng(seed) {}

  double normal() { return std::normal_distribution<double>()(eng); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(eng); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(eng); }
  bool coin(double p = 0.5) { return uniform(0.0, 1.0) < p; }

  Vector vector(Eigen::Index n, double scale = 1.0) {
    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = scale * normal();
    return v;
  }
  Matrix matrix(Eigen::Index r, Eigen::Index c, double scale = 1.0) {
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
      for (Eigen::Index j = 0; j < c; ++j) m(i, j) = scale * normal();
    return m;
  }
  /// SPD with eigenvalues in [lo, hi]; the condition number is at most hi / lo.
  Matrix spd(Eigen::Index n, double lo = 0.2, double hi = 2.0) {
    const Eigen::HouseholderQR<Matrix> qr(matrix(n, n));
    const Matrix q = qr.householderQ();
    Vector lam(n);
    for (Eigen::Index i = 0; i < n; ++i) lam(i) = uniform(lo, hi);
    return symmetrize(q * lam.asDiagonal() * q.transpose());
  }
  /// PSD of rank `rank`.
  Matrix psd(Eigen::Index n, Eigen::Index rank) {
    const Matrix f = matrix(n, rank);
    return f * f.transpose();
  }
};

[[nodiscard]] inline double max_abs(const Matrix& m) { return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff(); }

// ---------------------------------------------------------------------------
// Dense joint-Gaussian oracle

/// Joint Gaussian of a stacked vector with indexed conditioning. Works on the
/// full covariance without any recursion.
struct JointGaussian {
  Vector mean;
  Matrix cov;

  /// Conditions on exact values of linear functionals L x + c = value with
  /// noise covariance `noise`.
  [[nodiscard]] JointGaussian condition(const Matrix& l, const Vector& c, const Vector& value,
                                        const Matrix& noise) const {
    const Matrix s = l * cov * l.transpose() + noise;
    const Matrix k = cov * l.transpose() * s.ldlt().solve(Matrix::Identity(s.rows(), s.rows()));
    return {mean + k * (value - l * mean - c), symmetrize(cov - k * l * cov)};
  }
  /// log density of L x + c + e at `value`.
  [[nodiscard]] double logpdf(const Matrix& l, const Vector& c, const Vector& value, const Matrix& noise) const {
    const Matrix s = symmetrize(l * cov * l.transpose() + noise);
    const Eigen::LLT<Matrix> llt(s);
    const Vector r = value - l * mean - c;
    const Matrix& lm = llt.matrixLLT();
    double logdet = 0.0;
    for (Eigen::Index i = 0; i < lm.rows(); ++i) logdet += 2.0 * std::log(lm(i, i));
    const Vector w = llt.matrixL().solve(r);
    return -0.5 * (static_cast<double>(r.size()) * std::log(2.0 * M_PI) + logdet + w.squaredNorm());
  }
};

/// Joint law of X_{0:N} (each of dimension p) under X_0 ~ N(m0, S0),
/// X_{n+1} = Q X_n + R^{1/2} e. Stacked as [X_0; X_1; ...; X_N].
[[nodiscard]] inline JointGaussian markov_joint(const Vector& m0, const Matrix& s0, const Matrix& q, const Matrix& r,
                                                int n_steps) {
  const Eigen::Index p = m0.size();
  const Eigen::Index big = p * (n_steps + 1);
  JointGaussian out{Vector(big), Matrix::Zero(big, big)};
  std::vector<Matrix> marg{s0};
  Vector m = m0;
  out.mean.head(p) = m0;
  for (int n = 1; n <= n_steps; ++n) {
    m = q * m;
    out.mean.segment(n * p, p) = m;
    marg.push_back(q * marg.back() * q.transpose() + r);
  }
  // Cov(X_n, X_k) = Q^{n-k} Cov(X_k) for n >= k.
  for (int k = 0; k <= n_steps; ++k) {
    Matrix c = marg[k];
    for (int n = k; n <= n_steps; ++n) {
      out.cov.block(n * p, k * p, p, p) = c;
      out.cov.block(k * p, n * p, p, p) = c.transpose();
      c = q * c;
    }
  }
  return out;
}

/// Selector of block n in the stacked vector.
[[nodiscard]] inline Matrix selector(Eigen::Index p, int n, int n_steps) {
  Matrix s = Matrix::Zero(p, p * (n_steps + 1));
  s.block(0, n * p, p, p).setIdentity();
  return s;
}

// ---------------------------------------------------------------------------
// Random linear ODE problems with linear-Gaussian measurements

/// x^(q-1)_k = sum over variables l and columns j < q - 1 of lambda(k, l q + j) X_l^(j) + c_k.
/// The surrogate is then exact for the linearized interrogations.
struct LinearCase {
  OdeProblem problem;
  BlockPrior prior;
  SolverSpec spec;
  GaussObsModel obs;
  ObsData data;
  Matrix lambda;  // d x (d q)
  Vector offset;  // d
  bool coupled = false;
};

[[nodiscard]] inline LinearCase random_linear_case(Gen& g, int max_d = 2, int max_q = 3, int max_n = 5) {
  LinearCase c;
  const int d = g.integer(1, max_d);
  const int q = g.integer(2, max_q);
  const int n_steps = g.integer(1, max_n);
  c.coupled = d > 1 && g.coin();
  c.lambda = Matrix::Zero(d, d * q);
  for (int k = 0; k < d; ++k)
    for (int l = 0; l < d; ++l) {
      if (l != k && !c.coupled) continue;
      for (int j = 0; j < q - 1; ++j) c.lambda(k, l * q + j) = 0.5 * g.normal();
    }
  c.offset = g.vector(d, 0.5);
  Matrix w = Matrix::Zero(1, q);
  w(0, q - 1) = 1.0;
  c.problem.weight.assign(static_cast<std::size_t>(d), w);
  c.problem.field = [lam = c.lambda, off = c.offset](const Matrix& x, double, const Vector&) -> Matrix {
    return lam * stack_rows(x) + off;
  };
  c.problem.jacobian = [lam = c.lambda](const Matrix&, double, const Vector&) -> Matrix { return lam; };
  c.problem.init = g.matrix(d, q, 0.7);
  c.problem.t_min = g.uniform(-1.0, 1.0);
  const double dt = g.uniform(0.1, 0.6);
  c.problem.t_max = c.problem.t_min + dt * n_steps;
  std::vector<double> sig;
  for (int k = 0; k < d; ++k) sig.push_back(g.uniform(0.3, 2.0));
  c.prior = ibm_init(dt, q, sig);
  c.spec.n_steps = n_steps;
  c.spec.interrogation = c.coupled ? InterrogationMethod::tronarp
                                   : (g.coin() ? InterrogationMethod::kramer : InterrogationMethod::tronarp);
  c.spec.kalman_type = g.coin() ? KalmanType::standard : KalmanType::square_root;

  // One or two observation times on the grid, one row per variable, some masked.
  const int m = g.integer(1, 2);
  std::vector<int> steps;
  for (int i = 0; i < m; ++i) steps.push_back(g.integer(0, n_steps));
  std::sort(steps.begin(), steps.end());
  for (int n : steps) {
    c.obs.times.push_back(c.problem.t_min + n * dt);
    std::vector<Matrix> wd, vd;
    Matrix y(d, 1);
    for (int k = 0; k < d; ++k) {
      Matrix dk = g.matrix(1, q);
      Matrix om(1, 1);
      om(0, 0) = g.uniform(0.05, 1.0);
      if (d > 1 && k == 0 && g.coin(0.25)) {
        dk.setZero();
        om.setZero();
      }
      wd.push_back(dk);
      vd.push_back(om);
      y(k, 0) = g.normal();
    }
    c.obs.weight.push_back(wd);
    c.obs.var.push_back(vd);
    c.data.push_back(y);
  }
  return c;
}

/// Dense oracle for a LinearCase: joint law of all X_{0:N} with the exact
/// constraints Z_n = (W - Lambda) X_n - c at n = 1..N and the data rows.
struct LinearOracle {
  JointGaussian prior;
  Eigen::Index p = 0;  // d q
  int n_steps = 0;
  Matrix h;            // d x (d q) constraint map
  Vector c;            // d
  Matrix l_z;          // all constraints stacked
  Vector c_z;
  Matrix l_y;          // observed data rows stacked
  Vector y;
  Matrix omega;

  explicit LinearOracle(const LinearCase& lc) {
    const auto& pr = lc.problem;
    const Eigen::Index d = pr.n_vars(), q = pr.n_deriv();
    p = d * q;
    n_steps = lc.spec.n_steps;
    const BlockPrior dp = dense_prior(lc.prior);
    prior = markov_joint(stack_rows(pr.init), Matrix::Zero(p, p), dp.trans[0], dp.noise[0], n_steps);
    h = block_diag(pr.weight) - lc.lambda;
    c = -lc.offset;
    l_z = Matrix::Zero(d * n_steps, p * (n_steps + 1));
    c_z = Vector::Zero(d * n_steps);
    for (int n = 1; n <= n_steps; ++n) {
      l_z.block((n - 1) * d, 0, d, l_z.cols()) = h * selector(p, n, n_steps);
      c_z.segment((n - 1) * d, d) = c;
    }
    std::vector<Vector> rows;
    std::vector<double> ys, oms;
    const double dt = (pr.t_max - pr.t_min) / n_steps;
    for (std::size_t i = 0; i < lc.obs.times.size(); ++i) {
      const int n = static_cast<int>(std::lround((lc.obs.times[i] - pr.t_min) / dt));
      for (Eigen::Index k = 0; k < d; ++k) {
        const Matrix& dk = lc.obs.weight[i][static_cast<std::size_t>(k)];
        if (dk.isZero(0.0)) continue;
        Vector row = Vector::Zero(p * (n_steps + 1));
        row.segment(n * p + k * q, q) = dk.row(0).transpose();
        rows.push_back(row);
        ys.push_back(lc.data[i](k, 0));
        oms.push_back(lc.obs.var[i][static_cast<std::size_t>(k)](0, 0));
      }
    }
    l_y = Matrix::Zero(static_cast<Eigen::Index>(rows.size()), p * (n_steps + 1));
    y = Vector(static_cast<Eigen::Index>(rows.size()));
    omega = Matrix::Zero(y.size(), y.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      l_y.row(ii) = rows[i].transpose();
      y(ii) = ys[i];
      omega(ii, ii) = oms[i];
    }
  }

  /// Law of X_n given Z_{1:upto} = 0.
  [[nodiscard]] std::pair<Vector, Matrix> marginal(int n, int upto) const {
    const Eigen::Index dd = h.rows();
    const JointGaussian post =
        upto == 0 ? prior
                  : prior.condition(l_z.topRows(dd * upto), c_z.head(dd * upto), Vector::Zero(dd * upto),
                                    Matrix::Zero(dd * upto, dd * upto));
    const Matrix s = selector(p, n, n_steps);
    return {s * post.mean, s * post.cov * s.transpose()};
  }

  /// log p(Y | Z_{1:N} = 0).
  [[nodiscard]] double loglik() const {
    if (y.size() == 0) return 0.0;
    const Eigen::Index nz = l_z.rows();
    const JointGaussian post = prior.condition(l_z, c_z, Vector::Zero(nz), Matrix::Zero(nz, nz));
    return post.logpdf(l_y, Vector::Zero(y.size()), y, omega);
  }
};

/// Mean and covariance of a state in either layout, flattened by stacked rows.
[[nodiscard]] inline std::pair<Vector, Matrix> flatten(const BlockState& s) {
  const GaussState g = dense_state(s);
  return {g.mean, g.cov()};
}

/// Largest deviations of the recursions from the dense oracle on one case.
struct OracleErrors {
  double filter = 0.0;
  double smoother = 0.0;
  double fenrir = 0.0;
  double dalton = 0.0;
  double dalton_ng = 0.0;  // against dalton on the same inputs
};

[[nodiscard]] inline OracleErrors oracle_errors(const LinearCase& c) {
  const LinearOracle oracle(c);
  OracleErrors out;
  const ForwardPass fwd = solve_forward(c.problem, c.prior, c.spec);
  const BlockPrior pass_prior = needs_dense(c.problem, c.spec) ? dense_prior(c.prior) : c.prior;
  const std::vector<BlockState> sm = smooth_pass(fwd, pass_prior);
  for (int n = 0; n <= c.spec.n_steps; ++n) {
    const auto [fm, fc] = flatten(fwd.filtered[n]);
    const auto [om, oc] = oracle.marginal(n, n);
    out.filter = std::max({out.filter, max_abs(fm - om), max_abs(fc - oc)});
    const auto [sm_m, sm_c] = flatten(sm[n]);
    const auto [os_m, os_c] = oracle.marginal(n, c.spec.n_steps);
    out.smoother = std::max({out.smoother, max_abs(sm_m - os_m), max_abs(sm_c - os_c)});
  }
  const double ll = oracle.loglik();
  const double fe = fenrir_loglik(c.problem, c.prior, c.spec, c.obs, c.data);
  const double da = dalton_loglik(c.problem, c.prior, c.spec, c.obs, c.data);
  const double ng = dalton_ng_loglik(c.problem, c.prior, c.spec, as_generic(c.obs), c.data);
  out.fenrir = std::abs(fe - ll);
  out.dalton = std::abs(da - ll);
  out.dalton_ng = std::abs(ng - da);
  return out;
}

/// Random active-coordinate path and prior for the MAGI Markov density, with
/// the dense marginal log density of those coordinates as oracle.
struct MagiCase {
  std::vector<Matrix> xt;  // N+1 entries of d x m
  Matrix init;             // d x q
  BlockPrior prior;
  double dense = 0.0;
};

[[nodiscard]] inline MagiCase random_magi_case(Gen& g, int max_d = 2, int max_n = 4) {
  MagiCase c;
  const int d = g.integer(1, max_d);
  const int q = g.integer(2, 4);
  const int m = g.integer(2, q);  // n_active + 1 coordinates
  const int n_steps = g.integer(1, max_n);
  std::vector<double> sig;
  for (int k = 0; k < d; ++k) sig.push_back(g.uniform(0.3, 2.0));
  c.prior = ibm_init(g.uniform(0.1, 1.0), q, sig);
  c.init = g.matrix(d, q, 0.7);
  for (int n = 0; n <= n_steps; ++n) c.xt.push_back(g.matrix(d, m));
  for (int k = 0; k < d; ++k) {
    const auto kk = static_cast<std::size_t>(k);
    const JointGaussian joint =
        markov_joint(c.init.row(k).transpose(), Matrix::Zero(q, q), c.prior.trans[kk], c.prior.noise[kk], n_steps);
    Matrix l = Matrix::Zero(m * n_steps, q * (n_steps + 1));
    Vector x(m * n_steps);
    for (int n = 1; n <= n_steps; ++n) {
      l.block((n - 1) * m, n * q, m, m).setIdentity();
      x.segment((n - 1) * m, m) = c.xt[n].row(k).transpose();
    }
    c.dense += joint.logpdf(l, Vector::Zero(m * n_steps), x, Matrix::Zero(m * n_steps, m * n_steps));
  }
  return c;
}

}  // namespace rodeo::testing
