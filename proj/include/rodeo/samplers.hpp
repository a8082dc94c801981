/**
 * @file samplers.hpp
 * @brief Laplace approximation, windowed-adaptation HMC, random-walk
 *        Metropolis and the marginal MCMC chain driver.
 */
#pragma once

#include "rodeo/core.hpp"
#include "rodeo/inference.hpp"
#include "rodeo/numdiff.hpp"
#include "rodeo/rng.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace rodeo {

using LogDensity = std::function<double(const Vector&)>;
using LogDensityGrad = std::function<Vector(const Vector&)>;

namespace detail {
/// Errors and NaN count as zero density so optimizers and samplers back off.
inline double safe_eval(const LogDensity& f, const Vector& x) {
  try {
    const double v = f(x);
    return std::isnan(v) ? kNegInf : v;
  } catch (const NumericalError&) {
    return kNegInf;
  }
}

inline std::optional<Vector> safe_grad(const LogDensity& f, const LogDensityGrad& g, const Vector& x,
                                       const FdConfig& fd) {
  try {
    Vector out = g ? g(x) : fd_grad(f, x, fd);
    if (!out.allFinite()) return std::nullopt;
    return out;
  } catch (const NumericalError&) {
    return std::nullopt;
  }
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Laplace

struct LaplaceOptions {
  int max_iter = 200;
  double grad_tol = 1e-5;  // on the gradient's infinity norm, scaled by max(1, |f|)
  double f_tol = 1e-12;    // relative objective change between accepted steps
  FdConfig grad_fd{};
  FdConfig hess_fd = kHessianFd;
  /// Coordinates the covariance is reported for; empty means all.
  std::vector<int> subset;
  LogDensityGrad grad;  // optional analytic gradient
};

struct LaplaceResult {
  Vector mode;
  Matrix cov;              // over `index`, in that order
  std::vector<int> index;  // coordinates of mode spanned by cov
  double logpost = kNegInf;
  bool converged = false;
  int n_iter = 0;
};

/// BFGS ascent with Armijo backtracking, then an inverse negative
/// finite-difference Hessian at the mode.
[[nodiscard]] inline LaplaceResult laplace_fit(const LogDensity& logpost, const Vector& theta0,
                                               const LaplaceOptions& opts = {}) {
  require(opts.max_iter >= 1, "laplace_fit: max_iter must be positive");
  const Eigen::Index n = theta0.size();
  for (int i : opts.subset) require(i >= 0 && i < n, "laplace_fit: subset index out of range");
  auto f = [&](const Vector& x) { return -detail::safe_eval(logpost, x); };
  auto grad = [&](const Vector& x) -> std::optional<Vector> {
    if (opts.grad) {
      auto g = detail::safe_grad(logpost, opts.grad, x, opts.grad_fd);
      if (g) *g = -*g;
      return g;
    }
    try {
      Vector g = fd_grad([&](const Vector& y) {
        const double v = f(y);
        if (!std::isfinite(v)) throw NumericalError("objective non-finite near iterate");
        return v;
      }, x, opts.grad_fd);
      return g;
    } catch (const NumericalError&) {
      return std::nullopt;
    }
  };

  LaplaceResult out;
  Vector x = theta0;
  double fx = f(x);
  if (!std::isfinite(fx)) throw std::invalid_argument("laplace_fit: logpost is not finite at theta0");
  auto gx = grad(x);
  if (!gx) throw NumericalError("laplace_fit: gradient not finite at theta0");
  Matrix h_inv = Matrix::Identity(n, n);
  // Initial scaling keeps the first step length near 1.
  {
    const double gn = gx->norm();
    if (gn > 1.0) h_inv /= gn;
  }
  int it = 0;
  for (; it < opts.max_iter; ++it) {
    if (gx->lpNorm<Eigen::Infinity>() < opts.grad_tol * std::max(1.0, std::abs(fx))) {
      out.converged = true;
      break;
    }
    Vector dir = -h_inv * *gx;
    double slope = gx->dot(dir);
    if (slope >= 0.0) {
      h_inv = Matrix::Identity(n, n) / std::max(1.0, gx->norm());
      dir = -h_inv * *gx;
      slope = gx->dot(dir);
    }
    double step = 1.0;
    Vector x_new;
    double f_new = kNegInf;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      x_new = x + step * dir;
      f_new = f(x_new);
      if (std::isfinite(f_new) && f_new <= fx + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
    auto g_new = grad(x_new);
    if (!g_new) break;
    const Vector s = x_new - x;
    const Vector y = *g_new - *gx;
    const double sy = s.dot(y);
    const double rel_change = std::abs(fx - f_new) / std::max(1.0, std::abs(fx));
    x = x_new;
    gx = g_new;
    const double f_old = fx;
    fx = f_new;
    if (sy > 1e-12 * s.norm() * y.norm()) {
      if (it == 0) h_inv = Matrix::Identity(n, n) * (sy / y.squaredNorm());
      const double rho = 1.0 / sy;
      const Matrix id = Matrix::Identity(n, n);
      h_inv = (id - rho * s * y.transpose()) * h_inv * (id - rho * y * s.transpose()) + rho * s * s.transpose();
    }
    if (rel_change < opts.f_tol && std::abs(f_old - fx) >= 0.0 && s.lpNorm<Eigen::Infinity>() < 1e-10) {
      out.converged = true;
      ++it;
      break;
    }
  }
  if (!out.converged && gx->lpNorm<Eigen::Infinity>() < opts.grad_tol * std::max(1.0, std::abs(fx))) out.converged = true;
  out.mode = x;
  out.logpost = -fx;
  out.n_iter = it;

  if (opts.subset.empty()) {
    out.index.resize(static_cast<std::size_t>(n));
    std::iota(out.index.begin(), out.index.end(), 0);
  } else {
    out.index = opts.subset;
  }
  const auto m = static_cast<Eigen::Index>(out.index.size());
  auto f_sub = [&](const Vector& z) {
    Vector full = x;
    for (Eigen::Index i = 0; i < m; ++i) full(out.index[static_cast<std::size_t>(i)]) = z(i);
    const double v = logpost(full);
    if (!std::isfinite(v)) throw NumericalError("logpost not finite near the mode");
    return -v;
  };
  Vector z0(m);
  for (Eigen::Index i = 0; i < m; ++i) z0(i) = x(out.index[static_cast<std::size_t>(i)]);
  const Matrix hess = fd_hess(f_sub, z0, opts.hess_fd);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(hess);
  const double lo = eig.eigenvalues().minCoeff();
  if (!(lo > 0.0))
    throw NumericalError("laplace_fit: negative Hessian at the mode is not positive definite (eigenvalue " +
                         std::to_string(lo) + ")");
  out.cov = symmetrize(eig.eigenvectors() * eig.eigenvalues().cwiseInverse().asDiagonal() * eig.eigenvectors().transpose());
  return out;
}

// ---------------------------------------------------------------------------
// Chains

struct ChainResult {
  Matrix draws;  // n_samples x dim
  std::vector<bool> accepted;
  double acceptance_rate = 0.0;
  double step_size = 0.0;
  Vector inv_mass;
  int n_divergent = 0;
  std::string warning;
};

namespace detail {
inline void finish_chain(ChainResult& r) {
  const auto n = static_cast<double>(r.accepted.size());
  r.acceptance_rate = n > 0 ? static_cast<double>(std::count(r.accepted.begin(), r.accepted.end(), true)) / n : 0.0;
  if (!r.accepted.empty() && r.acceptance_rate == 0.0) r.warning = "all proposals rejected";
}
}  // namespace detail

struct HmcOptions {
  int n_warmup = 1000;
  int n_samples = 1000;
  int n_leapfrog = 5;
  double target_accept = 0.8;
  double init_step = 0.0;  // <= 0 selects a step size heuristically
  bool adapt_mass = true;
  FdConfig fd{};
};

namespace detail {

/// Step-size dual averaging state.
struct DualAveraging {
  double mu = 0.0, h_bar = 0.0, log_eps_bar = 0.0;
  int t = 0;
  double target = 0.8;
  static constexpr double gamma = 0.05, t0 = 10.0, kappa = 0.75;

  void restart(double eps) {
    mu = std::log(10.0 * eps);
    h_bar = 0.0;
    log_eps_bar = 0.0;
    t = 0;
  }
  double update(double accept_prob) {
    ++t;
    const double w = 1.0 / (t + t0);
    h_bar = (1.0 - w) * h_bar + w * (target - accept_prob);
    const double log_eps = mu - std::sqrt(static_cast<double>(t)) / gamma * h_bar;
    const double eta = std::pow(static_cast<double>(t), -kappa);
    log_eps_bar = eta * log_eps + (1.0 - eta) * log_eps_bar;
    return std::exp(log_eps);
  }
  [[nodiscard]] double final_step() const { return std::exp(log_eps_bar); }
};

/// Ends of the slow (mass-matrix) windows for a warmup of length n.
inline std::vector<int> mass_window_ends(int n_warmup) {
  int init_buf = 75, term_buf = 50, base = 25;
  if (n_warmup < init_buf + term_buf + base) {
    init_buf = static_cast<int>(0.15 * n_warmup);
    term_buf = static_cast<int>(0.1 * n_warmup);
    base = n_warmup - init_buf - term_buf;
  }
  std::vector<int> ends;
  if (base <= 0) return ends;
  const int last = n_warmup - term_buf;
  int start = init_buf, size = base;
  while (start < last) {
    int end = start + size;
    if (end + 2 * size > last) end = last;
    ends.push_back(end);
    start = end;
    size *= 2;
  }
  return ends;
}

struct Leapfrog {
  const LogDensity& f;
  const LogDensityGrad& g;
  FdConfig fd;

  struct Point {
    Vector x;
    double logp = kNegInf;
    Vector grad;
  };

  [[nodiscard]] std::optional<Point> eval(const Vector& x) const {
    Point p{x, safe_eval(f, x), {}};
    if (!std::isfinite(p.logp)) return std::nullopt;
    auto gr = safe_grad(f, g, x, fd);
    if (!gr) return std::nullopt;
    p.grad = *gr;
    return p;
  }

  /// Returns nullopt on a non-finite trajectory.
  [[nodiscard]] std::optional<std::pair<Point, Vector>> run(const Point& start, Vector mom, double eps, int n,
                                                            const Vector& inv_mass) const {
    Point cur = start;
    mom += 0.5 * eps * cur.grad;
    for (int i = 0; i < n; ++i) {
      const Vector x = cur.x + eps * inv_mass.cwiseProduct(mom);
      auto next = eval(x);
      if (!next) return std::nullopt;
      cur = *next;
      mom += (i + 1 < n ? 1.0 : 0.5) * eps * cur.grad;
    }
    return std::make_pair(cur, mom);
  }
};

inline double kinetic(const Vector& mom, const Vector& inv_mass) { return 0.5 * mom.dot(inv_mass.cwiseProduct(mom)); }

inline Vector draw_momentum(Key key, const Vector& inv_mass) {
  return standard_normal(key, inv_mass.size()).cwiseQuotient(inv_mass.cwiseSqrt());
}

}  // namespace detail

/// Leapfrog HMC. Warmup adapts the step size by dual averaging toward
/// `target_accept` and a diagonal inverse mass from windowed sample variances.
[[nodiscard]] inline ChainResult hmc_chain(Key key, const LogDensity& logpost, const LogDensityGrad& grad,
                                           const Vector& theta0, const HmcOptions& opts = {}) {
  require(opts.n_leapfrog >= 1, "hmc_chain: n_leapfrog must be at least 1");
  require(opts.n_warmup >= 0 && opts.n_samples >= 1, "hmc_chain: need n_warmup >= 0 and n_samples >= 1");
  const Eigen::Index dim = theta0.size();
  detail::Leapfrog lf{logpost, grad, opts.fd};
  auto start = lf.eval(theta0);
  if (!start) throw std::invalid_argument("hmc_chain: logpost or gradient not finite at theta0");
  detail::Leapfrog::Point cur = *start;
  Vector inv_mass = Vector::Ones(dim);

  // Heuristic initial step: halve/double until one leapfrog step accepts ~50%.
  auto one_step_accept = [&](double eps, Key k) {
    const Vector mom = detail::draw_momentum(k, inv_mass);
    auto res = lf.run(cur, mom, eps, 1, inv_mass);
    if (!res) return 0.0;
    const double h0 = -cur.logp + detail::kinetic(mom, inv_mass);
    const double h1 = -res->first.logp + detail::kinetic(res->second, inv_mass);
    return std::isfinite(h1) ? std::min(1.0, std::exp(h0 - h1)) : 0.0;
  };
  auto find_step = [&](double eps, Key k) {
    double a = one_step_accept(eps, split(k, 0));
    const int dir = a > 0.5 ? 1 : -1;
    for (int i = 1; i < 100; ++i) {
      const double next = dir > 0 ? eps * 2.0 : eps * 0.5;
      a = one_step_accept(next, split(k, static_cast<std::uint64_t>(i)));
      if ((dir > 0 && !(a > 0.5)) || (dir < 0 && a > 0.5)) return dir > 0 ? eps : next;
      eps = next;
    }
    return eps;
  };

  const Key warm_key = split(key, 0), sample_key = split(key, 1), init_key = split(key, 2);
  double eps = opts.init_step > 0.0 ? opts.init_step : find_step(1.0, split(init_key, 0));
  detail::DualAveraging da;
  da.target = opts.target_accept;
  da.restart(eps);

  ChainResult out;
  out.draws.resize(opts.n_samples, dim);
  const auto ends = detail::mass_window_ends(opts.n_warmup);
  std::size_t window = 0;
  int window_start = opts.n_warmup < 150 ? static_cast<int>(0.15 * opts.n_warmup) : 75;
  Vector w_mean = Vector::Zero(dim), w_m2 = Vector::Zero(dim);
  int w_n = 0;

  auto transition = [&](Key k, double step, bool& accepted, bool& divergent) {
    const Vector mom = detail::draw_momentum(split(k, 0), inv_mass);
    const double h0 = -cur.logp + detail::kinetic(mom, inv_mass);
    auto res = lf.run(cur, mom, step, opts.n_leapfrog, inv_mass);
    accepted = false;
    divergent = false;
    if (!res) {
      divergent = true;
      return 0.0;
    }
    const double h1 = -res->first.logp + detail::kinetic(res->second, inv_mass);
    if (!std::isfinite(h1) || h1 - h0 > 1000.0) {
      divergent = true;
      return 0.0;
    }
    const double a = std::min(1.0, std::exp(h0 - h1));
    if (uniform01(split(k, 1)) < a) {
      cur = res->first;
      accepted = true;
    }
    return a;
  };

  for (int i = 0; i < opts.n_warmup; ++i) {
    bool acc = false, div = false;
    const double a = transition(split(warm_key, static_cast<std::uint64_t>(i)), eps, acc, div);
    eps = da.update(a);
    if (opts.adapt_mass && window < ends.size() && i >= window_start) {
      ++w_n;
      const Vector delta = cur.x - w_mean;
      w_mean += delta / w_n;
      w_m2 += delta.cwiseProduct(cur.x - w_mean);
      if (i + 1 == ends[window]) {
        const double nn = w_n;
        const Vector var = w_n > 1 ? Vector(w_m2 / (nn - 1.0)) : Vector::Ones(dim);
        inv_mass = (nn / (nn + 5.0)) * var + Vector::Constant(dim, 1e-3 * 5.0 / (nn + 5.0));
        window_start = i + 1;
        ++window;
        w_mean.setZero();
        w_m2.setZero();
        w_n = 0;
        eps = find_step(eps, split(init_key, 1 + window));
        da.restart(eps);
      }
    }
  }
  if (opts.n_warmup > 0) eps = da.final_step();

  for (int i = 0; i < opts.n_samples; ++i) {
    bool acc = false, div = false;
    (void)transition(split(sample_key, static_cast<std::uint64_t>(i)), eps, acc, div);
    out.accepted.push_back(acc);
    if (div) ++out.n_divergent;
    out.draws.row(i) = cur.x.transpose();
  }
  out.step_size = eps;
  out.inv_mass = inv_mass;
  detail::finish_chain(out);
  return out;
}

/// Random-walk Metropolis with N(theta, diag(sigma_rw^2)) proposals.
[[nodiscard]] inline ChainResult rwm_chain(Key key, const LogDensity& logpost, const Vector& theta0,
                                           const Vector& sigma_rw, int n_samples) {
  require(sigma_rw.size() == theta0.size(), "rwm_chain: sigma_rw must match theta0");
  require((sigma_rw.array() >= 0.0).all(), "rwm_chain: sigma_rw must be non-negative");
  require(n_samples >= 1, "rwm_chain: n_samples must be at least 1");
  Vector x = theta0;
  double lp = detail::safe_eval(logpost, x);
  if (!std::isfinite(lp)) throw std::invalid_argument("rwm_chain: logpost not finite at theta0");
  ChainResult out;
  out.draws.resize(n_samples, theta0.size());
  for (int i = 0; i < n_samples; ++i) {
    const Key k = split(key, static_cast<std::uint64_t>(i));
    const Vector prop = x + sigma_rw.cwiseProduct(standard_normal(split(k, 0), x.size()));
    const double lp_prop = detail::safe_eval(logpost, prop);
    const bool acc = std::isfinite(lp_prop) && std::log(uniform01(split(k, 1))) < lp_prop - lp;
    if (acc) {
      x = prop;
      lp = lp_prop;
    }
    out.accepted.push_back(acc);
    out.draws.row(i) = x.transpose();
  }
  detail::finish_chain(out);
  return out;
}

/// Marginal MCMC driven by the random-walk kernel.
[[nodiscard]] inline ChainResult rwm_marginal_chain(Key key, const MarginalModel& model, const Vector& theta0,
                                                    const Vector& sigma_rw, int n_samples) {
  require(sigma_rw.size() == theta0.size(), "rwm_marginal_chain: sigma_rw must match theta0");
  require((sigma_rw.array() >= 0.0).all(), "rwm_marginal_chain: sigma_rw must be non-negative");
  require(n_samples >= 1, "rwm_marginal_chain: n_samples must be at least 1");
  MarginalState state = marginal_init(split(key, 0), model, theta0);
  auto propose = [&](Key k, const Vector& theta) -> Vector {
    return theta + sigma_rw.cwiseProduct(standard_normal(k, theta.size()));
  };
  ChainResult out;
  out.draws.resize(n_samples, theta0.size());
  const Key chain_key = split(key, 1);
  for (int i = 0; i < n_samples; ++i) {
    auto [next, acc] = marginal_mcmc_step(split(chain_key, static_cast<std::uint64_t>(i)), state, model, propose);
    state = std::move(next);
    out.accepted.push_back(acc);
    out.draws.row(i) = state.theta.transpose();
  }
  detail::finish_chain(out);
  return out;
}

// ---------------------------------------------------------------------------
// Chain summaries

/// Monte Carlo standard error of the mean by non-overlapping batch means.
[[nodiscard]] inline double batch_means_se(const Vector& x, int n_batches = 50) {
  require(x.size() >= 2 * n_batches, "batch_means_se: chain too short for the batch count");
  const Eigen::Index b = x.size() / n_batches;
  Vector means(n_batches);
  for (int i = 0; i < n_batches; ++i) means(i) = x.segment(i * b, b).mean();
  const double m = means.mean();
  const double var = (means.array() - m).square().sum() / (n_batches - 1.0);
  return std::sqrt(var / n_batches);
}

/// Kolmogorov-Smirnov distance between a sample and a continuous cdf.
template <class Cdf>
[[nodiscard]] double ks_distance(std::vector<double> x, Cdf&& cdf) {
  require(!x.empty(), "ks_distance: empty sample");
  std::sort(x.begin(), x.end());
  const auto n = static_cast<double>(x.size());
  double d = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double f = cdf(x[i]);
    d = std::max({d, (i + 1) / n - f, f - i / n});
  }
  return d;
}

}  // namespace rodeo
