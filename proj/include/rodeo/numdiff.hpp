#pragma once

#include "rodeo/core.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

namespace rodeo {

/// Central finite differences. h_j = rel_step * max(1, |x_j|).
struct FdConfig {
  double rel_step = 1e-6;
};

/// Second differences lose half the digits of first differences, so Hessians
/// default to a larger step.
inline constexpr FdConfig kHessianFd{1e-4};

namespace detail {
inline void check_config(const FdConfig& cfg) {
  require(cfg.rel_step > 0.0 && cfg.rel_step <= 1e-2, "FdConfig.rel_step must lie in (0, 1e-2]");
}
inline double fd_step(const FdConfig& cfg, double x) { return cfg.rel_step * std::max(1.0, std::abs(x)); }
inline double checked(double v) {
  if (!std::isfinite(v)) throw NumericalError("finite difference: non-finite function value");
  return v;
}
}  // namespace detail

template <class F>
[[nodiscard]] Vector fd_grad(F&& f, const Vector& x, const FdConfig& cfg = {}) {
  detail::check_config(cfg);
  Vector g(x.size());
  Vector xp = x;
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    const double h = detail::fd_step(cfg, x(j));
    xp(j) = x(j) + h;
    const double fp = detail::checked(f(xp));
    xp(j) = x(j) - h;
    const double fm = detail::checked(f(xp));
    xp(j) = x(j);
    g(j) = (fp - fm) / (2.0 * h);
  }
  return g;
}

template <class F>
[[nodiscard]] Matrix fd_jac(F&& f, const Vector& x, const FdConfig& cfg = {}) {
  detail::check_config(cfg);
  Vector xp = x;
  Matrix jac;
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    const double h = detail::fd_step(cfg, x(j));
    xp(j) = x(j) + h;
    const Vector fp = f(xp);
    xp(j) = x(j) - h;
    const Vector fm = f(xp);
    xp(j) = x(j);
    if (!fp.allFinite() || !fm.allFinite()) throw NumericalError("finite difference: non-finite function value");
    if (j == 0) jac.resize(fp.size(), x.size());
    jac.col(j) = (fp - fm) / (2.0 * h);
  }
  return jac;
}

template <class F>
[[nodiscard]] Matrix fd_hess(F&& f, const Vector& x, const FdConfig& cfg = kHessianFd) {
  detail::check_config(cfg);
  const Eigen::Index n = x.size();
  Matrix hess(n, n);
  Vector xp = x;
  const double f0 = detail::checked(f(x));
  for (Eigen::Index i = 0; i < n; ++i) {
    const double hi = detail::fd_step(cfg, x(i));
    xp(i) = x(i) + hi;
    const double fp = detail::checked(f(xp));
    xp(i) = x(i) - hi;
    const double fm = detail::checked(f(xp));
    xp(i) = x(i);
    hess(i, i) = (fp - 2.0 * f0 + fm) / (hi * hi);
    for (Eigen::Index j = 0; j < i; ++j) {
      const double hj = detail::fd_step(cfg, x(j));
      double acc = 0.0;
      for (int si : {1, -1}) {
        for (int sj : {1, -1}) {
          xp(i) = x(i) + si * hi;
          xp(j) = x(j) + sj * hj;
          acc += si * sj * detail::checked(f(xp));
        }
      }
      xp(i) = x(i);
      xp(j) = x(j);
      hess(i, j) = hess(j, i) = acc / (4.0 * hi * hj);
    }
  }
  return symmetrize(hess);
}

}  // namespace rodeo
