/**
 * @file solver.hpp
 * @brief Blocked probabilistic ODE solver: interrogated forward filter,
 *        smoothing pass and backward sampling pass.
 */
#pragma once

#include "rodeo/core.hpp"
#include "rodeo/interrogate.hpp"
#include "rodeo/kalman.hpp"
#include "rodeo/prior.hpp"
#include "rodeo/rng.hpp"

#include <cmath>
#include <vector>

namespace rodeo {

struct SolverSpec {
  int n_steps = 100;
  InterrogationMethod interrogation = InterrogationMethod::kramer;
  KalmanType kalman_type = KalmanType::standard;
  Key key{};
  FdConfig fd{};
};

/// predicted[0] and filtered[0] both hold the pinned initial state; the
/// interrogation at index 0 is empty.
struct ForwardPass {
  double t_min = 0.0;
  double dt = 0.0;
  std::vector<BlockState> predicted;
  std::vector<BlockState> filtered;
  std::vector<Interrogation> interrogations;

  [[nodiscard]] int n_steps() const { return static_cast<int>(filtered.size()) - 1; }
  [[nodiscard]] double time(int n) const { return t_min + n * dt; }
};

struct SolutionPosterior {
  std::vector<double> times;
  std::vector<Matrix> means;              // (N+1) entries of d x q
  std::vector<std::vector<Matrix>> covs;  // (N+1) x d entries of q x q
};

/// Rows (z, a, W, V) of the Gaussian observation applied to one block.
struct BlockObservation {
  Vector z;
  Vector a;
  Matrix w;
  Matrix v;
};
using StepObservation = std::vector<BlockObservation>;

[[nodiscard]] inline StepObservation surrogate_observation(const Interrogation& it, const std::vector<Matrix>& weight) {
  StepObservation out;
  for (std::size_t k = 0; k < weight.size(); ++k)
    out.push_back({Vector::Zero(it.a[k].size()), it.a[k], weight[k] + it.b[k], it.v[k]});
  return out;
}

/// Appends rows (y, 0, D, Omega) to a block observation.
inline void append_rows(BlockObservation& o, const Vector& y, const Matrix& d, const Matrix& omega) {
  const Eigen::Index r = o.z.size(), s = y.size();
  Vector z(r + s), a(r + s);
  z << o.z, y;
  a << o.a, Vector::Zero(s);
  Matrix w(r + s, o.w.cols());
  w << o.w, d;
  Matrix v = Matrix::Zero(r + s, r + s);
  v.topLeftCorner(r, r) = o.v;
  v.bottomRightCorner(s, s) = omega;
  o = {z, a, w, v};
}

[[nodiscard]] inline double grid_dt(const OdeProblem& p, int n_steps) { return (p.t_max - p.t_min) / n_steps; }

/// The dense path replaces d blocks with one block of size d q. It is forced
/// when the interrogation keeps cross-variable Jacobian terms.
[[nodiscard]] inline bool needs_dense(const OdeProblem& p, const SolverSpec& spec) {
  return spec.interrogation == InterrogationMethod::tronarp && p.n_vars() > 1;
}

inline void check_inputs(const OdeProblem& p, const BlockPrior& prior, const SolverSpec& spec) {
  p.validate();
  require(spec.n_steps >= 1, "SolverSpec.n_steps must be at least 1");
  require(prior.n_blocks() == static_cast<std::size_t>(p.n_vars()), "BlockPrior must have one block per variable");
  require(prior.noise.size() == prior.trans.size(), "BlockPrior trans/noise length mismatch");
  for (std::size_t k = 0; k < prior.n_blocks(); ++k)
    require(prior.trans[k].rows() == p.n_deriv() && prior.trans[k].cols() == p.n_deriv() &&
                prior.noise[k].rows() == p.n_deriv() && prior.noise[k].cols() == p.n_deriv(),
            "BlockPrior blocks must be q x q");
  const double dt = grid_dt(p, spec.n_steps);
  require(std::abs(prior.dt - dt) <= 1e-9 * std::abs(dt), "BlockPrior dt must equal (t_max - t_min) / n_steps");
}

[[nodiscard]] inline BlockState initial_state(const OdeProblem& p, KalmanType type) {
  BlockState out;
  const Eigen::Index q = p.n_deriv();
  for (Eigen::Index k = 0; k < p.n_vars(); ++k)
    out.push_back({p.init.row(k).transpose(), Matrix::Zero(q, q), type});
  return out;
}

[[nodiscard]] inline Key interrogation_key(Key root, int n) { return split(split(root, 0), static_cast<std::uint64_t>(n)); }
[[nodiscard]] inline Key sampling_key(Key root, int n) { return split(split(root, 1), static_cast<std::uint64_t>(n)); }

/// Forward filter over the interrogated surrogate. At each step, `augment`
/// may append data rows to the surrogate observation; when `log_forecast` is
/// given, the log forecast density of the (augmented) observation is added to it.
/// Signature: void augment(int n, const BlockState& predicted, StepObservation& obs).
template <class Augment>
[[nodiscard]] ForwardPass filter_pass(const OdeProblem& p, const BlockPrior& prior, const SolverSpec& spec,
                                      Augment&& augment, double* log_forecast = nullptr) {
  check_inputs(p, prior, spec);
  const int n_steps = spec.n_steps;
  ForwardPass out;
  out.t_min = p.t_min;
  out.dt = grid_dt(p, n_steps);
  out.predicted.reserve(n_steps + 1);
  out.filtered.reserve(n_steps + 1);
  out.interrogations.reserve(n_steps + 1);
  BlockState state = initial_state(p, spec.kalman_type);
  out.predicted.push_back(state);
  out.filtered.push_back(state);
  out.interrogations.emplace_back();
  const std::size_t d = state.size();
  const Vector zero_drift = Vector::Zero(p.n_deriv());
  for (int n = 1; n <= n_steps; ++n) {
    try {
      BlockState pred(d);
      for (std::size_t k = 0; k < d; ++k) pred[k] = predict(state[k], zero_drift, prior.trans[k], prior.noise[k]);
      const double t = out.time(n);
      Interrogation it = interrogate(spec.interrogation, interrogation_key(spec.key, n), pred, p, t, spec.fd);
      StepObservation obs = surrogate_observation(it, p.weight);
      augment(n, pred, obs);
      for (std::size_t k = 0; k < d; ++k) {
        const auto& o = obs[k];
        if (log_forecast) {
          const GaussState fc = forecast(pred[k], o.a, o.w, o.v);
          *log_forecast += logpdf(o.z, fc);
        }
        state[k] = update(pred[k], o.z, o.a, o.w, o.v);
      }
      out.predicted.push_back(std::move(pred));
      out.filtered.push_back(state);
      out.interrogations.push_back(std::move(it));
    } catch (const NumericalError& e) {
      throw e.at_step(n);
    }
  }
  return out;
}

struct NoAugment {
  void operator()(int, const BlockState&, StepObservation&) const {}
};

/// Forward pass. The returned pass is in dense layout (one block) when
/// needs_dense(p, spec).
[[nodiscard]] inline ForwardPass solve_forward(const OdeProblem& p, const BlockPrior& prior, const SolverSpec& spec) {
  if (needs_dense(p, spec)) return filter_pass(dense_problem(p), dense_prior(prior), spec, NoAugment{});
  return filter_pass(p, prior, spec, NoAugment{});
}

/// Smoothed states mu_{n|N}, Sigma_{n|N} in the layout of `fwd`.
[[nodiscard]] inline std::vector<BlockState> smooth_pass(const ForwardPass& fwd, const BlockPrior& prior) {
  const int n_steps = fwd.n_steps();
  std::vector<BlockState> out(n_steps + 1);
  out[n_steps] = fwd.filtered[n_steps];
  const std::size_t d = out[n_steps].size();
  for (int n = n_steps - 1; n >= 0; --n) {
    try {
      out[n].resize(d);
      for (std::size_t k = 0; k < d; ++k)
        out[n][k] = smooth(out[n + 1][k], fwd.filtered[n][k], fwd.predicted[n + 1][k], prior.trans[k], prior.noise[k]);
    } catch (const NumericalError& e) {
      throw e.at_step(n);
    }
  }
  return out;
}

namespace detail {
inline SolutionPosterior to_posterior(const ForwardPass& fwd, const std::vector<BlockState>& sm, Eigen::Index d,
                                      Eigen::Index q) {
  SolutionPosterior out;
  const bool dense = sm.front().size() == 1 && d > 1;
  for (int n = 0; n <= fwd.n_steps(); ++n) {
    out.times.push_back(fwd.time(n));
    std::vector<Matrix> covs;
    if (dense) {
      const Matrix c = sm[n][0].cov();
      out.means.push_back(unstack_rows(sm[n][0].mean, d, q));
      for (Eigen::Index k = 0; k < d; ++k) covs.push_back(c.block(k * q, k * q, q, q));
    } else {
      out.means.push_back(state_means(sm[n]));
      for (const auto& b : sm[n]) covs.push_back(b.cov());
    }
    out.covs.push_back(std::move(covs));
  }
  return out;
}
}  // namespace detail

[[nodiscard]] inline SolutionPosterior solve_mv(const OdeProblem& p, const BlockPrior& prior, const SolverSpec& spec) {
  if (needs_dense(p, spec)) {
    const BlockPrior dp = dense_prior(prior);
    const ForwardPass fwd = filter_pass(dense_problem(p), dp, spec, NoAugment{});
    return detail::to_posterior(fwd, smooth_pass(fwd, dp), p.n_vars(), p.n_deriv());
  }
  const ForwardPass fwd = filter_pass(p, prior, spec, NoAugment{});
  return detail::to_posterior(fwd, smooth_pass(fwd, prior), p.n_vars(), p.n_deriv());
}

/// Backward sample path from a forward pass, in the pass layout.
[[nodiscard]] inline std::vector<Matrix> sample_pass(Key key, const ForwardPass& fwd, const BlockPrior& prior) {
  const int n_steps = fwd.n_steps();
  const std::size_t d = fwd.filtered.front().size();
  std::vector<Matrix> out(n_steps + 1);
  std::vector<Vector> draw(d);
  for (std::size_t k = 0; k < d; ++k) draw[k] = sample(split(sampling_key(key, n_steps), k), fwd.filtered[n_steps][k]);
  auto pack = [&] {
    Matrix m(static_cast<Eigen::Index>(d), draw.front().size());
    for (std::size_t k = 0; k < d; ++k) m.row(static_cast<Eigen::Index>(k)) = draw[k].transpose();
    return m;
  };
  out[n_steps] = pack();
  for (int n = n_steps - 1; n >= 0; --n) {
    try {
      for (std::size_t k = 0; k < d; ++k)
        draw[k] = sample_back(split(sampling_key(key, n), k), draw[k], fwd.filtered[n][k], fwd.predicted[n + 1][k],
                              prior.trans[k], prior.noise[k]);
    } catch (const NumericalError& e) {
      throw e.at_step(n);
    }
    out[n] = pack();
  }
  return out;
}

/// One draw X_{0:N} as (N+1) matrices of shape d x q.
[[nodiscard]] inline std::vector<Matrix> solve_sim(const OdeProblem& p, const BlockPrior& prior, const SolverSpec& spec) {
  if (needs_dense(p, spec)) {
    const BlockPrior dp = dense_prior(prior);
    const ForwardPass fwd = filter_pass(dense_problem(p), dp, spec, NoAugment{});
    std::vector<Matrix> path = sample_pass(spec.key, fwd, dp);
    for (auto& x : path) x = unstack_rows(x.row(0).transpose(), p.n_vars(), p.n_deriv());
    return path;
  }
  const ForwardPass fwd = filter_pass(p, prior, spec, NoAugment{});
  return sample_pass(spec.key, fwd, prior);
}

}  // namespace rodeo
