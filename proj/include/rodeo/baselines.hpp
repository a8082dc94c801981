#pragma once

#include "rodeo/core.hpp"

#include <functional>
#include <vector>

namespace rodeo {

/// g(x, t) for a first-order system.
using OdeRhs = std::function<Vector(const Vector&, double)>;

struct DetSolution {
  std::vector<double> grid;
  std::vector<Vector> values;
};

namespace detail {
inline Vector checked_rhs(const OdeRhs& g, const Vector& x, double t, int n) {
  Vector out = g(x, t);
  if (!out.allFinite()) throw NumericalError("field returned non-finite values", n);
  return out;
}

template <class Step>
DetSolution fixed_step(const Vector& x0, double t_min, double t_max, int n_steps, Step&& step) {
  require(n_steps >= 1, "fixed-step solver: n_steps must be at least 1");
  require(t_min < t_max, "fixed-step solver: t_min must be less than t_max");
  const double h = (t_max - t_min) / n_steps;
  DetSolution out;
  out.grid.reserve(n_steps + 1);
  out.values.reserve(n_steps + 1);
  out.grid.push_back(t_min);
  out.values.push_back(x0);
  Vector x = x0;
  for (int n = 0; n < n_steps; ++n) {
    const double t = t_min + n * h;
    x = step(x, t, h, n);
    out.grid.push_back(t_min + (n + 1) * h);
    out.values.push_back(x);
  }
  return out;
}
}  // namespace detail

[[nodiscard]] inline DetSolution euler_solve(const OdeRhs& g, const Vector& x0, double t_min, double t_max,
                                             int n_steps) {
  return detail::fixed_step(x0, t_min, t_max, n_steps, [&](const Vector& x, double t, double h, int n) -> Vector {
    return x + h * detail::checked_rhs(g, x, t, n);
  });
}

[[nodiscard]] inline DetSolution rk4_solve(const OdeRhs& g, const Vector& x0, double t_min, double t_max,
                                           int n_steps) {
  return detail::fixed_step(x0, t_min, t_max, n_steps, [&](const Vector& x, double t, double h, int n) -> Vector {
    const Vector k1 = detail::checked_rhs(g, x, t, n);
    const Vector k2 = detail::checked_rhs(g, x + 0.5 * h * k1, t + 0.5 * h, n);
    const Vector k3 = detail::checked_rhs(g, x + 0.5 * h * k2, t + 0.5 * h, n);
    const Vector k4 = detail::checked_rhs(g, x + h * k3, t + h, n);
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  });
}

}  // namespace rodeo
