/**
 * @file inference.hpp
 * @brief Likelihood approximations for ODE parameter inference: Basic,
 *        Fenrir, DALTON (Gaussian and generic measurements), MAGI, and the
 *        marginal MCMC transition.
 */
#pragma once

#include "rodeo/core.hpp"
#include "rodeo/kalman.hpp"
#include "rodeo/numdiff.hpp"
#include "rodeo/prior.hpp"
#include "rodeo/rng.hpp"
#include "rodeo/solver.hpp"

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace rodeo {

/// Observations at times[i]: Y_i^(k) ~ N(D_i^(k) X^(k), Omega_i^(k)).
/// An all-zero row of D marks an unobserved component; it contributes nothing.
struct GaussObsModel {
  std::vector<double> times;
  std::vector<std::vector<Matrix>> weight;  // [i][k], s x q
  std::vector<std::vector<Matrix>> var;     // [i][k], s x s
};

/// Arbitrary measurement law on s_i = D_i X (row k of s is D_i^(k) X^(k)).
struct GenObsModel {
  using LogLik = std::function<double(int, const Matrix&, const Matrix&)>;
  /// Gradient (stacked rows of s) and Hessian of -loglik in s.
  using NegGradHess = std::function<std::pair<Vector, Matrix>(int, const Matrix&, const Matrix&)>;

  std::vector<double> times;
  std::vector<std::vector<Matrix>> mask;  // [i][k], s x q
  LogLik loglik;                          // log p(Y_i | s), arguments (i, Y_i, s)
  NegGradHess neg_grad_hess;              // optional; finite differences when empty
};

using ObsModel = std::variant<GaussObsModel, GenObsModel>;
/// Y_i as a d x s matrix per observation time.
using ObsData = std::vector<Matrix>;

// ---------------------------------------------------------------------------
// Observation bookkeeping

/// n(i) for each observation time, rounding to the nearest grid point.
[[nodiscard]] inline std::vector<int> obs_grid_indices(const std::vector<double>& times, double t_min, double dt,
                                                       int n_steps) {
  std::vector<int> out;
  out.reserve(times.size());
  for (std::size_t i = 0; i < times.size(); ++i) {
    const double pos = (times[i] - t_min) / dt;
    const long n = std::lround(pos);
    if (n < 0 || n > n_steps || std::abs(times[i] - (t_min + n * dt)) > 0.5 * dt * (1.0 + 1e-9))
      throw std::invalid_argument("observation time " + std::to_string(times[i]) + " (index " + std::to_string(i) +
                                  ") does not lie on the solver grid");
    out.push_back(static_cast<int>(n));
  }
  return out;
}

/// For each grid step, the observations mapped to it.
[[nodiscard]] inline std::vector<std::vector<int>> obs_by_step(const std::vector<int>& idx, int n_steps) {
  std::vector<std::vector<int>> out(n_steps + 1);
  for (std::size_t i = 0; i < idx.size(); ++i) out[idx[i]].push_back(static_cast<int>(i));
  return out;
}

/// Observed rows only: (y, D, Omega) restricted to rows where D is nonzero.
struct ActiveRows {
  Vector y;
  Matrix d;
  Matrix omega;
  [[nodiscard]] bool empty() const { return y.size() == 0; }
};

[[nodiscard]] inline ActiveRows active_rows(const Vector& y, const Matrix& d, const Matrix& omega) {
  std::vector<Eigen::Index> rows;
  for (Eigen::Index i = 0; i < d.rows(); ++i)
    if (!d.row(i).isZero(0.0)) rows.push_back(i);
  return {linalg::take(y, rows), linalg::take_rows(d, rows), linalg::take(omega, rows)};
}

inline void check_gauss_obs(const GaussObsModel& obs, const ObsData& data, std::size_t d) {
  require(obs.weight.size() == obs.times.size() && obs.var.size() == obs.times.size(),
          "GaussObsModel: weight/var must have one entry per observation time");
  require(data.size() == obs.times.size(), "observation data must have one entry per observation time");
  for (std::size_t i = 0; i < obs.times.size(); ++i) {
    require(obs.weight[i].size() == d && obs.var[i].size() == d, "GaussObsModel: one block per variable");
    require(data[i].rows() == static_cast<Eigen::Index>(d), "observation data: one row per variable");
    for (std::size_t k = 0; k < d; ++k)
      require(obs.weight[i][k].rows() == data[i].cols() && obs.var[i][k].rows() == data[i].cols() &&
                  obs.var[i][k].cols() == data[i].cols(),
              "GaussObsModel: block dimensions disagree with data");
  }
}

inline void check_gen_obs(const GenObsModel& obs, const ObsData& data, std::size_t d) {
  require(static_cast<bool>(obs.loglik), "GenObsModel: loglik missing");
  require(obs.mask.size() == obs.times.size(), "GenObsModel: mask must have one entry per observation time");
  require(data.size() == obs.times.size(), "observation data must have one entry per observation time");
  for (std::size_t i = 0; i < obs.times.size(); ++i) require(obs.mask[i].size() == d, "GenObsModel: one mask block per variable");
}

/// s = D X blockwise, rows of X being the variables.
[[nodiscard]] inline Matrix apply_mask(const std::vector<Matrix>& d, const Matrix& x) {
  const Eigen::Index s = d.front().rows();
  Matrix out(static_cast<Eigen::Index>(d.size()), s);
  for (std::size_t k = 0; k < d.size(); ++k)
    out.row(static_cast<Eigen::Index>(k)) = (d[k] * x.row(static_cast<Eigen::Index>(k)).transpose()).transpose();
  return out;
}

/// Measurement log-density at a state X (d x q) for observation i.
[[nodiscard]] inline double obs_loglik_at(const ObsModel& obs, const ObsData& data, int i, const Matrix& x) {
  if (const auto* g = std::get_if<GaussObsModel>(&obs)) {
    double ll = 0.0;
    for (std::size_t k = 0; k < g->weight[i].size(); ++k) {
      const ActiveRows a = active_rows(data[i].row(static_cast<Eigen::Index>(k)).transpose(), g->weight[i][k], g->var[i][k]);
      if (a.empty()) continue;
      ll += mvn_logpdf(a.y, a.d * x.row(static_cast<Eigen::Index>(k)).transpose(), a.omega);
    }
    return ll;
  }
  const auto& gen = std::get<GenObsModel>(obs);
  return gen.loglik(i, data[i], apply_mask(gen.mask[i], x));
}

[[nodiscard]] inline const std::vector<double>& obs_times(const ObsModel& obs) {
  return std::visit([](const auto& o) -> const std::vector<double>& { return o.times; }, obs);
}

inline void check_obs(const ObsModel& obs, const ObsData& data, std::size_t d) {
  if (const auto* g = std::get_if<GaussObsModel>(&obs)) check_gauss_obs(*g, data, d);
  else check_gen_obs(std::get<GenObsModel>(obs), data, d);
}

/// Gaussian measurements as a generic model with quadratic -loglik.
[[nodiscard]] inline GenObsModel as_generic(const GaussObsModel& g) {
  GenObsModel out;
  out.times = g.times;
  out.mask = g.weight;
  // Density of y given s where rows of s are already D x; Omega is the noise.
  auto var = g.var;
  out.loglik = [var](int i, const Matrix& y, const Matrix& s) {
    double ll = 0.0;
    for (std::size_t k = 0; k < var[i].size(); ++k) {
      const auto kk = static_cast<Eigen::Index>(k);
      const Vector yk = y.row(kk).transpose();
      const Vector sk = s.row(kk).transpose();
      std::vector<Eigen::Index> rows;
      for (Eigen::Index j = 0; j < yk.size(); ++j)
        if (!var[i][k].row(j).isZero(0.0)) rows.push_back(j);
      if (rows.empty()) continue;
      ll += mvn_logpdf(linalg::take(yk, rows), linalg::take(sk, rows), linalg::take(var[i][k], rows));
    }
    return ll;
  };
  out.neg_grad_hess = [var](int i, const Matrix& y, const Matrix& s) {
    const Eigen::Index d = s.rows(), sd = s.cols();
    Vector grad = Vector::Zero(d * sd);
    Matrix hess = Matrix::Zero(d * sd, d * sd);
    for (Eigen::Index k = 0; k < d; ++k) {
      const Matrix& om = var[i][static_cast<std::size_t>(k)];
      std::vector<Eigen::Index> rows;
      for (Eigen::Index j = 0; j < sd; ++j)
        if (!om.row(j).isZero(0.0)) rows.push_back(j);
      if (rows.empty()) continue;
      const auto llt = linalg::chol(linalg::take(om, rows), "observation noise");
      const Vector res = linalg::take(Vector(s.row(k).transpose() - y.row(k).transpose()), rows);
      const Vector gk = llt.solve(res);
      const Matrix hk = llt.solve(Matrix::Identity(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.size())));
      for (std::size_t a = 0; a < rows.size(); ++a) {
        grad(k * sd + rows[a]) = gk(static_cast<Eigen::Index>(a));
        for (std::size_t b = 0; b < rows.size(); ++b)
          hess(k * sd + rows[a], k * sd + rows[b]) = hk(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
      }
    }
    return std::make_pair(grad, hess);
  };
  return out;
}

// ---------------------------------------------------------------------------
// Dense layout conversions (used when the solver runs on one block)

[[nodiscard]] inline GaussObsModel dense_obs(const GaussObsModel& g) {
  GaussObsModel out;
  out.times = g.times;
  for (std::size_t i = 0; i < g.times.size(); ++i) {
    out.weight.push_back({block_diag(g.weight[i])});
    out.var.push_back({block_diag(g.var[i])});
  }
  return out;
}

[[nodiscard]] inline GenObsModel dense_obs(const GenObsModel& g, Eigen::Index d, Eigen::Index s) {
  GenObsModel out;
  out.times = g.times;
  for (const auto& m : g.mask) out.mask.push_back({block_diag(m)});
  out.loglik = [f = g.loglik, d, s](int i, const Matrix& y, const Matrix& sv) {
    return f(i, unstack_rows(y.row(0).transpose(), d, s), unstack_rows(sv.row(0).transpose(), d, s));
  };
  if (g.neg_grad_hess) {
    out.neg_grad_hess = [f = g.neg_grad_hess, d, s](int i, const Matrix& y, const Matrix& sv) {
      return f(i, unstack_rows(y.row(0).transpose(), d, s), unstack_rows(sv.row(0).transpose(), d, s));
    };
  }
  return out;
}

[[nodiscard]] inline ObsData dense_data(const ObsData& data) {
  ObsData out;
  for (const auto& y : data) out.push_back(stack_rows(y).transpose());
  return out;
}

[[nodiscard]] inline ObsModel dense_obs(const ObsModel& obs, const ObsData& data) {
  if (const auto* g = std::get_if<GaussObsModel>(&obs)) return dense_obs(*g);
  const Eigen::Index d = data.empty() ? 1 : data.front().rows();
  const Eigen::Index s = data.empty() ? 1 : data.front().cols();
  return dense_obs(std::get<GenObsModel>(obs), d, s);
}

// ---------------------------------------------------------------------------
// Basic

/// log-likelihood with the smoothed solver mean plugged into the measurement law.
[[nodiscard]] inline double basic_loglik(const OdeProblem& p, const BlockPrior& prior, const SolverSpec& spec,
                                         const ObsModel& obs, const ObsData& data) {
  check_obs(obs, data, static_cast<std::size_t>(p.n_vars()));
  const auto idx = obs_grid_indices(obs_times(obs), p.t_min, grid_dt(p, spec.n_steps), spec.n_steps);
  const SolutionPosterior post = solve_mv(p, prior, spec);
  double ll = 0.0;
  for (std::size_t i = 0; i < idx.size(); ++i) ll += obs_loglik_at(obs, data, static_cast<int>(i), post.means[idx[i]]);
  return ll;
}

// ---------------------------------------------------------------------------
// Fenrir

namespace detail {
inline double absorb_gauss(BlockState& state, const GaussObsModel& obs, const ObsData& data, int i) {
  double ll = 0.0;
  for (std::size_t k = 0; k < state.size(); ++k) {
    const ActiveRows a = active_rows(data[i].row(static_cast<Eigen::Index>(k)).transpose(), obs.weight[i][k], obs.var[i][k]);
    if (a.empty()) continue;
    const Vector zero = Vector::Zero(a.y.size());
    ll += logpdf(a.y, forecast(state[k], zero, a.d, a.omega));
    state[k] = update(state[k], a.y, zero, a.d, a.omega);
  }
  return ll;
}
}  // namespace detail

[[nodiscard]] inline double fenrir_loglik(const OdeProblem& p, const BlockPrior& prior, const SolverSpec& spec,
                                          const GaussObsModel& obs, const ObsData& data) {
  if (needs_dense(p, spec))
    return fenrir_loglik(dense_problem(p), dense_prior(prior), spec, dense_obs(obs), dense_data(data));
  check_gauss_obs(obs, data, static_cast<std::size_t>(p.n_vars()));
  const auto idx = obs_grid_indices(obs.times, p.t_min, grid_dt(p, spec.n_steps), spec.n_steps);
  if (idx.empty()) return 0.0;
  const auto at = obs_by_step(idx, spec.n_steps);
  const ForwardPass fwd = filter_pass(p, prior, spec, NoAugment{});
  const int n_steps = fwd.n_steps();
  BlockState back = fwd.filtered[n_steps];
  double ll = 0.0;
  for (int n = n_steps; n >= 0; --n) {
    try {
      if (n < n_steps) {
        for (std::size_t k = 0; k < back.size(); ++k)
          back[k] = push(condition(fwd.filtered[n][k], fwd.predicted[n + 1][k], prior.trans[k], prior.noise[k]), back[k]);
      }
      for (int i : at[n]) ll += detail::absorb_gauss(back, obs, data, i);
    } catch (const NumericalError& e) {
      throw e.at_step(n);
    }
  }
  return ll;
}

// ---------------------------------------------------------------------------
// DALTON, Gaussian measurements

[[nodiscard]] inline double dalton_loglik(const OdeProblem& p, const BlockPrior& prior, const SolverSpec& spec,
                                          const GaussObsModel& obs, const ObsData& data) {
  if (needs_dense(p, spec))
    return dalton_loglik(dense_problem(p), dense_prior(prior), spec, dense_obs(obs), dense_data(data));
  check_gauss_obs(obs, data, static_cast<std::size_t>(p.n_vars()));
  const auto idx = obs_grid_indices(obs.times, p.t_min, grid_dt(p, spec.n_steps), spec.n_steps);
  const auto at = obs_by_step(idx, spec.n_steps);

  double l_z = 0.0;
  (void)filter_pass(p, prior, spec, NoAugment{}, &l_z);

  double l_yz = 0.0;
  BlockState init = initial_state(p, spec.kalman_type);
  for (int i : at[0]) l_yz += detail::absorb_gauss(init, obs, data, i);
  auto augment = [&](int n, const BlockState&, StepObservation& o) {
    for (int i : at[n]) {
      for (std::size_t k = 0; k < o.size(); ++k) {
        const ActiveRows a = active_rows(data[i].row(static_cast<Eigen::Index>(k)).transpose(), obs.weight[i][k], obs.var[i][k]);
        if (!a.empty()) append_rows(o[k], a.y, a.d, a.omega);
      }
    }
  };
  (void)filter_pass(p, prior, spec, augment, &l_yz);
  return l_yz - l_z;
}

// ---------------------------------------------------------------------------
// DALTON, generic measurements

namespace detail {

inline std::pair<Vector, Matrix> neg_grad_hess(const GenObsModel& obs, int i, const Matrix& y, const Matrix& s) {
  if (obs.neg_grad_hess) return obs.neg_grad_hess(i, y, s);
  const Eigen::Index d = s.rows(), sd = s.cols();
  auto h = [&](const Vector& v) { return -obs.loglik(i, y, unstack_rows(v, d, sd)); };
  const Vector s0 = stack_rows(s);
  return {fd_grad(h, s0), fd_hess(h, s0)};
}

/// Number of exact (zero-noise) surrogate rows per block at a step.
inline std::vector<Eigen::Index> exact_rows(const Interrogation& it, const std::vector<Matrix>& weight) {
  std::vector<Eigen::Index> out;
  for (std::size_t k = 0; k < weight.size(); ++k) {
    const Matrix wb = weight[k] + it.b[k];
    Eigen::Index c = 0;
    for (Eigen::Index j = 0; j < wb.rows(); ++j)
      if (it.v[k](j, j) == 0.0 && !wb.row(j).isZero(0.0)) ++c;
    out.push_back(c);
  }
  return out;
}

/// log density of the path `path` (steps 1..N) under the backward Markov
/// factorization of a forward pass, each factor restricted to its support.
inline double backward_path_logpdf(const ForwardPass& fwd, const BlockPrior& prior,
                                   const std::vector<BlockState>& path, const std::vector<Matrix>& weight) {
  const int n_steps = fwd.n_steps();
  double ll = 0.0;
  for (int n = n_steps; n >= 1; --n) {
    try {
      const auto nullity = exact_rows(fwd.interrogations[n], weight);
      for (std::size_t k = 0; k < path[n].size(); ++k) {
        const Vector& x = path[n][k].mean;
        if (n == n_steps) {
          const GaussState& f = fwd.filtered[n][k];
          ll += mvn_logpdf_reduced(x, f.mean, f.cov(), nullity[k]);
        } else {
          const AffineCond c = condition(fwd.filtered[n][k], fwd.predicted[n + 1][k], prior.trans[k], prior.noise[k]);
          ll += mvn_logpdf_reduced(x, c.gain * path[n + 1][k].mean + c.offset, c.cov(), nullity[k]);
        }
      }
    } catch (const NumericalError& e) {
      throw e.at_step(n);
    }
  }
  return ll;
}

}  // namespace detail

[[nodiscard]] inline double dalton_ng_loglik(const OdeProblem& p, const BlockPrior& prior, const SolverSpec& spec,
                                             const GenObsModel& obs, const ObsData& data) {
  if (needs_dense(p, spec)) {
    const Eigen::Index d = data.empty() ? 1 : data.front().rows(), s = data.empty() ? 1 : data.front().cols();
    return dalton_ng_loglik(dense_problem(p), dense_prior(prior), spec, dense_obs(obs, d, s), dense_data(data));
  }
  check_gen_obs(obs, data, static_cast<std::size_t>(p.n_vars()));
  const auto idx = obs_grid_indices(obs.times, p.t_min, grid_dt(p, spec.n_steps), spec.n_steps);
  const auto at = obs_by_step(idx, spec.n_steps);

  // Pseudo-observations from a Laplace expansion of each observation at the
  // predicted mean of the augmented pass.
  auto augment = [&](int n, const BlockState& pred, StepObservation& o) {
    for (int i : at[n]) {
      const Matrix s_hat = apply_mask(obs.mask[i], state_means(pred));
      const auto [g1, g2] = detail::neg_grad_hess(obs, i, data[i], s_hat);
      const Eigen::Index sd = s_hat.cols();
      for (std::size_t k = 0; k < o.size(); ++k) {
        const auto kk = static_cast<Eigen::Index>(k);
        if (obs.mask[i][k].isZero(0.0)) continue;
        const Matrix hk = g2.block(kk * sd, kk * sd, sd, sd);
        // Rows without curvature carry no information (infinite pseudo-noise).
        std::vector<Eigen::Index> rows;
        for (Eigen::Index j = 0; j < sd; ++j)
          if (!obs.mask[i][k].row(j).isZero(0.0) && !hk.row(j).isZero(0.0)) rows.push_back(j);
        if (rows.empty()) continue;
        const auto r = static_cast<Eigen::Index>(rows.size());
        Eigen::LLT<Matrix> llt(symmetrize(linalg::take(hk, rows)));
        if (llt.info() != Eigen::Success)
          throw NumericalError("Hessian of the negative log-likelihood is not positive definite at observation " +
                               std::to_string(i));
        const Matrix cov = llt.solve(Matrix::Identity(r, r));
        const Vector g1k = g1.segment(kk * sd, sd);
        const Vector y_hat = linalg::take(Vector(s_hat.row(kk).transpose()), rows) - llt.solve(linalg::take(g1k, rows));
        append_rows(o[k], y_hat, linalg::take_rows(obs.mask[i][k], rows), symmetrize(cov));
      }
    }
  };
  const ForwardPass aug = filter_pass(p, prior, spec, augment);
  const std::vector<BlockState> sm = smooth_pass(aug, prior);
  const double l_xyz = detail::backward_path_logpdf(aug, prior, sm, p.weight);

  const ForwardPass free = filter_pass(p, prior, spec, NoAugment{});
  const double l_xz = detail::backward_path_logpdf(free, prior, sm, p.weight);

  double l_y = 0.0;
  for (std::size_t i = 0; i < idx.size(); ++i)
    l_y += obs.loglik(static_cast<int>(i), data[i], apply_mask(obs.mask[i], state_means(sm[idx[i]])));
  return l_xz + l_y - l_xyz;
}

// ---------------------------------------------------------------------------
// MAGI

namespace detail {

inline void check_magi(const OdeProblem& p, const BlockPrior& prior, Eigen::Index n_active, std::size_t n_points) {
  p.validate();
  require(n_active >= 1 && n_active < p.n_deriv(), "magi: n_active must satisfy 1 <= n_active < q");
  require(n_points >= 2, "magi: latent path needs at least two time points");
  for (const auto& w : p.weight) {
    Matrix expect = Matrix::Zero(1, p.n_deriv());
    expect(0, n_active) = 1.0;
    require(w.rows() == 1 && w == expect, "magi: W must select derivative n_active of each variable");
  }
  require(prior.n_blocks() == static_cast<std::size_t>(p.n_vars()), "magi: prior must have one block per variable");
  const double dt = (p.t_max - p.t_min) / static_cast<double>(n_points - 1);
  require(std::abs(prior.dt - dt) <= 1e-9 * dt, "magi: prior dt must equal the latent grid spacing");
}

/// Padded state with u in the first n_active columns and f(u) in column n_active.
inline Matrix magi_state(const OdeProblem& p, const Matrix& u, double t, Eigen::Index n_active) {
  Matrix x = Matrix::Zero(p.n_vars(), p.n_deriv());
  x.leftCols(n_active) = u;
  const Matrix fx = p.field(x, t, p.params);
  if (!fx.allFinite()) throw NumericalError("vector field returned non-finite values");
  x.col(n_active) = fx.col(0);
  return x;
}

}  // namespace detail

/// log p(X~_{1:N} | eta) for a path of active coordinates X~_n (d x (n_active+1)),
/// by the forecast/update recursion with exact observations of X~.
/// When `grad` is non-null it receives d/dX~_n (entry 0 stays zero since X~_0
/// does not enter) and `grad_init` the gradient in the initial mean v.
[[nodiscard]] inline double magi_markov_logpdf(const std::vector<Matrix>& xt, const Matrix& init,
                                               const BlockPrior& prior, KalmanType type = KalmanType::standard,
                                               std::vector<Matrix>* grad = nullptr, Matrix* grad_init = nullptr) {
  const int n_steps = static_cast<int>(xt.size()) - 1;
  const Eigen::Index d = init.rows(), q = init.cols(), m = xt.front().cols();
  require(m <= q, "magi_markov_logpdf: more active coordinates than q");
  const Matrix wt = Matrix::Identity(m, q);
  const Vector zq = Vector::Zero(q), zm = Vector::Zero(m);
  const Matrix vm = Matrix::Zero(m, m);
  double ll = 0.0;
  if (grad) grad->assign(xt.size(), Matrix::Zero(d, m));
  if (grad_init) *grad_init = Matrix::Zero(d, q);
  for (Eigen::Index k = 0; k < d; ++k) {
    const auto kk = static_cast<std::size_t>(k);
    GaussState s{init.row(k).transpose(), Matrix::Zero(q, q), type};
    // Gains and innovation precisions do not depend on X~, so the gradient is
    // a linear adjoint sweep over them.
    std::vector<Matrix> gains, trans_eff;
    std::vector<Vector> g_innov;
    for (int n = 1; n <= n_steps; ++n) {
      try {
        const GaussState pred = predict(s, zq, prior.trans[kk], prior.noise[kk]);
        const GaussState fc = forecast(pred, zm, wt, vm);
        const Vector x = xt[n].row(k).transpose();
        ll += logpdf(x, fc);
        if (grad) {
          const Matrix sp = pred.cov();
          const auto llt = linalg::chol(fc.cov(), "magi forecast covariance");
          const Matrix gain = llt.solve(wt * sp).transpose();
          g_innov.push_back(-llt.solve(Vector(x - fc.mean)));
          gains.push_back(gain);
          trans_eff.push_back((Matrix::Identity(q, q) - gain * wt) * prior.trans[kk]);
        }
        s = update(pred, x, zm, wt, vm);
      } catch (const NumericalError& e) {
        throw e.at_step(n);
      }
    }
    if (grad) {
      Vector lam = Vector::Zero(q);
      for (int n = n_steps; n >= 1; --n) {
        const auto j = static_cast<std::size_t>(n - 1);
        (*grad)[n].row(k) = (g_innov[j] + gains[j].transpose() * lam).transpose();
        lam = -(wt * prior.trans[kk]).transpose() * g_innov[j] + trans_eff[j].transpose() * lam;
      }
      if (grad_init) grad_init->row(k) = lam.transpose();
    }
  }
  return ll;
}

/// log pi + (1/beta) log p(X~_{1:N} | eta) + log p(Y | X~). `u_tilde` holds
/// N+1 matrices of shape d x n_active; X~_n = (U~_n, f(U~_n, t_n)).
[[nodiscard]] inline double magi_logpost(const std::vector<Matrix>& u_tilde, const OdeProblem& p,
                                         const BlockPrior& prior, const ObsModel& obs, const ObsData& data,
                                         double beta, Eigen::Index n_active, double log_prior = 0.0,
                                         KalmanType type = KalmanType::standard) {
  require(beta > 0.0, "magi: beta must be positive");
  detail::check_magi(p, prior, n_active, u_tilde.size());
  check_obs(obs, data, static_cast<std::size_t>(p.n_vars()));
  const int n_steps = static_cast<int>(u_tilde.size()) - 1;
  const double dt = prior.dt;
  std::vector<Matrix> xt;
  std::vector<Matrix> full;
  for (int n = 0; n <= n_steps; ++n) {
    require(u_tilde[n].rows() == p.n_vars() && u_tilde[n].cols() == n_active, "magi: u_tilde entries must be d x n_active");
    full.push_back(detail::magi_state(p, u_tilde[n], p.t_min + n * dt, n_active));
    xt.push_back(full.back().leftCols(n_active + 1));
  }
  const double l_markov = magi_markov_logpdf(xt, p.init, prior, type);
  const auto idx = obs_grid_indices(obs_times(obs), p.t_min, dt, n_steps);
  double l_y = 0.0;
  for (std::size_t i = 0; i < idx.size(); ++i) l_y += obs_loglik_at(obs, data, static_cast<int>(i), full[idx[i]]);
  return log_prior + l_markov / beta + l_y;
}

/// magi_logpost (without log pi) and its gradient in u_tilde. The Markov term
/// uses the adjoint sweep; the chain rule through f and the measurement term
/// use central differences in the d x n_active coordinates of each step.
[[nodiscard]] inline std::pair<double, std::vector<Matrix>> magi_logpost_grad(
    const std::vector<Matrix>& u_tilde, const OdeProblem& p, const BlockPrior& prior, const ObsModel& obs,
    const ObsData& data, double beta, Eigen::Index n_active, KalmanType type = KalmanType::standard,
    const FdConfig& fd = {}) {
  require(beta > 0.0, "magi: beta must be positive");
  detail::check_magi(p, prior, n_active, u_tilde.size());
  check_obs(obs, data, static_cast<std::size_t>(p.n_vars()));
  const int n_steps = static_cast<int>(u_tilde.size()) - 1;
  const double dt = prior.dt;
  const Eigen::Index d = p.n_vars();
  std::vector<Matrix> xt, full;
  for (int n = 0; n <= n_steps; ++n) {
    require(u_tilde[n].rows() == d && u_tilde[n].cols() == n_active, "magi: u_tilde entries must be d x n_active");
    full.push_back(detail::magi_state(p, u_tilde[n], p.t_min + n * dt, n_active));
    xt.push_back(full.back().leftCols(n_active + 1));
  }
  std::vector<Matrix> g_x;
  const double l_markov = magi_markov_logpdf(xt, p.init, prior, type, &g_x);
  std::vector<Matrix> grad(u_tilde.size(), Matrix::Zero(d, n_active));
  for (int n = 1; n <= n_steps; ++n) {
    const double t = p.t_min + n * dt;
    const Vector gf = g_x[n].col(n_active);
    auto proj = [&](const Vector& u) {
      Matrix x = Matrix::Zero(d, p.n_deriv());
      x.leftCols(n_active) = unstack_rows(u, d, n_active);
      return gf.dot(p.field(x, t, p.params).col(0));
    };
    grad[n] = (g_x[n].leftCols(n_active) + unstack_rows(fd_grad(proj, stack_rows(u_tilde[n]), fd), d, n_active)) / beta;
  }
  const auto idx = obs_grid_indices(obs_times(obs), p.t_min, dt, n_steps);
  double l_y = 0.0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const int n = idx[i];
    const double t = p.t_min + n * dt;
    l_y += obs_loglik_at(obs, data, static_cast<int>(i), full[n]);
    auto ll = [&](const Vector& u) {
      return obs_loglik_at(obs, data, static_cast<int>(i), detail::magi_state(p, unstack_rows(u, d, n_active), t, n_active));
    };
    grad[n] += unstack_rows(fd_grad(ll, stack_rows(u_tilde[n]), fd), d, n_active);
  }
  return {l_markov / beta + l_y, grad};
}

/// beta = eta^{-2} dt^{2-2q} dt_obs.
[[nodiscard]] inline double magi_beta(double eta, double dt, int q, double dt_obs) {
  return std::pow(eta, -2.0) * std::pow(dt, 2.0 - 2.0 * q) * dt_obs;
}

// ---------------------------------------------------------------------------
// Marginal MCMC

/// Everything the marginal chain needs from a model, as functions of Theta.
struct MarginalModel {
  std::function<std::pair<OdeProblem, BlockPrior>(const Vector&)> build;
  std::function<double(const Vector&)> log_prior;
  /// log p(Y | X_{0:N}) for a sampled path.
  std::function<double(const Vector&, const std::vector<Matrix>&)> loglik;
  int n_steps = 100;
  KalmanType kalman_type = KalmanType::standard;
};

struct MarginalState {
  Vector theta;
  std::vector<Matrix> path;
  double log_prior = kNegInf;
  double loglik = kNegInf;
};

namespace detail {
inline MarginalState marginal_eval(Key key, const MarginalModel& m, const Vector& theta) {
  MarginalState out;
  out.theta = theta;
  out.log_prior = m.log_prior(theta);
  if (!std::isfinite(out.log_prior)) return out;
  try {
    auto [problem, prior] = m.build(theta);
    SolverSpec spec;
    spec.n_steps = m.n_steps;
    spec.interrogation = InterrogationMethod::chkrebtii;
    spec.kalman_type = m.kalman_type;
    spec.key = key;
    out.path = solve_sim(problem, prior, spec);
    out.loglik = m.loglik(theta, out.path);
  } catch (const NumericalError&) {
    out.loglik = kNegInf;
  } catch (const std::invalid_argument&) {
    out.loglik = kNegInf;
  }
  if (!std::isfinite(out.loglik)) out.loglik = kNegInf;
  return out;
}
}  // namespace detail

[[nodiscard]] inline MarginalState marginal_init(Key key, const MarginalModel& m, const Vector& theta0) {
  MarginalState s = detail::marginal_eval(key, m, theta0);
  if (!std::isfinite(s.log_prior) || !std::isfinite(s.loglik))
    throw std::invalid_argument("marginal MCMC: initial parameter has non-finite posterior");
  return s;
}

/// One Metropolis-Hastings transition. `propose` draws Theta' given the key;
/// `log_q_ratio(from, to)` returns log q(from | to) - log q(to | from) and may
/// be empty for symmetric proposals.
template <class Propose>
[[nodiscard]] std::pair<MarginalState, bool> marginal_mcmc_step(
    Key key, const MarginalState& current, const MarginalModel& m, Propose&& propose,
    const std::function<double(const Vector&, const Vector&)>& log_q_ratio = {}) {
  const Vector theta_prop = propose(split(key, 0), current.theta);
  MarginalState prop = detail::marginal_eval(split(key, 1), m, theta_prop);
  if (!std::isfinite(prop.log_prior) || !std::isfinite(prop.loglik)) return {current, false};
  double log_rho = (prop.loglik + prop.log_prior) - (current.loglik + current.log_prior);
  if (log_q_ratio) log_rho += log_q_ratio(current.theta, theta_prop);
  const double u = uniform01(split(key, 2));
  if (std::isfinite(log_rho) && std::log(u) < log_rho) return {std::move(prop), true};
  return {current, false};
}

}  // namespace rodeo
