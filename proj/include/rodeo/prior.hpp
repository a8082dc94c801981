#pragma once

#include "rodeo/core.hpp"

#include <cmath>
#include <functional>
#include <utility>
#include <vector>

namespace rodeo {

/// Per-variable Gaussian Markov prior X_{n+1}^(k) | X_n^(k) ~ N(Q^(k) X_n^(k), R^(k)).
struct BlockPrior {
  std::vector<Matrix> trans;
  std::vector<Matrix> noise;
  double dt = 0.0;
  std::vector<double> sigma;

  [[nodiscard]] std::size_t n_blocks() const { return trans.size(); }
};

/// f(X, t, theta) with X of shape d x q (row k is variable k); returns d x r.
using VectorField = std::function<Matrix(const Matrix&, double, const Vector&)>;
/// d f / d X as a (d r) x (d q) matrix in stacked-row ordering.
using FieldJacobian = std::function<Matrix(const Matrix&, double, const Vector&)>;

struct OdeProblem {
  std::vector<Matrix> weight;
  VectorField field;
  FieldJacobian jacobian;  // optional; finite differences when empty
  Matrix init;
  double t_min = 0.0;
  double t_max = 1.0;
  Vector params;

  [[nodiscard]] Eigen::Index n_vars() const { return init.rows(); }
  [[nodiscard]] Eigen::Index n_deriv() const { return init.cols(); }
  [[nodiscard]] Eigen::Index n_rows() const { return weight.empty() ? 0 : weight.front().rows(); }

  void validate() const {
    require(t_min < t_max, "OdeProblem: t_min must be less than t_max");
    require(static_cast<bool>(field), "OdeProblem: vector field missing");
    require(init.rows() >= 1 && init.allFinite(), "OdeProblem: init must be finite with at least one variable");
    require(static_cast<Eigen::Index>(weight.size()) == init.rows(), "OdeProblem: one weight block per variable");
    for (const auto& w : weight)
      require(w.rows() >= 1 && w.rows() == weight.front().rows() && w.cols() == init.cols(),
              "OdeProblem: weight blocks must be r x q with common r >= 1");
  }
};

namespace detail {
inline double factorial(int n) {
  double out = 1.0;
  for (int i = 2; i <= n; ++i) out *= i;
  return out;
}
}  // namespace detail

[[nodiscard]] inline BlockPrior ibm_init(double dt, int q, const std::vector<double>& sigma) {
  require(dt > 0.0, "ibm_init: dt must be positive");
  require(q >= 1, "ibm_init: q must be at least 1");
  require(!sigma.empty(), "ibm_init: sigma must name at least one variable");
  for (double s : sigma) require(s >= 0.0 && std::isfinite(s), "ibm_init: sigma must be non-negative");
  Matrix qm = Matrix::Zero(q, q);
  Matrix rm(q, q);
  for (int i = 0; i < q; ++i) {
    for (int j = 0; j < q; ++j) {
      if (i <= j) qm(i, j) = std::pow(dt, j - i) / detail::factorial(j - i);
      const int e = 2 * q - 1 - i - j;
      rm(i, j) = std::pow(dt, e) / (e * detail::factorial(q - 1 - i) * detail::factorial(q - 1 - j));
    }
  }
  BlockPrior out;
  out.dt = dt;
  out.sigma = sigma;
  for (double s : sigma) {
    out.trans.push_back(qm);
    out.noise.push_back(s * s * rm);
  }
  return out;
}

[[nodiscard]] inline std::pair<Matrix, Matrix> indep_init(const std::vector<std::pair<Matrix, Matrix>>& blocks) {
  require(!blocks.empty(), "indep_init: empty block list");
  std::vector<Matrix> qs, rs;
  for (const auto& [q, r] : blocks) {
    require(q.rows() == q.cols() && r.rows() == q.rows() && r.cols() == q.cols(), "indep_init: blocks must be square and matched");
    qs.push_back(q);
    rs.push_back(r);
  }
  return {block_diag(qs), block_diag(rs)};
}

/// Single-block prior holding the block-diagonal assembly of `prior`.
[[nodiscard]] inline BlockPrior dense_prior(const BlockPrior& prior) {
  std::vector<std::pair<Matrix, Matrix>> blocks;
  for (std::size_t k = 0; k < prior.n_blocks(); ++k) blocks.emplace_back(prior.trans[k], prior.noise[k]);
  auto [q, r] = indep_init(blocks);
  return {{q}, {r}, prior.dt, {1.0}};
}

/// First-order field g(x, t, theta) on d values.
using FirstOrderField = std::function<Vector(const Vector&, double, const Vector&)>;

[[nodiscard]] inline std::pair<std::vector<Matrix>, VectorField> first_order_pad(FirstOrderField g, int n_vars,
                                                                                 int n_deriv) {
  require(n_deriv >= 2, "first_order_pad: n_deriv must be at least 2");
  require(n_vars >= 1, "first_order_pad: n_vars must be positive");
  Matrix w = Matrix::Zero(1, n_deriv);
  w(0, 1) = 1.0;
  std::vector<Matrix> weight(static_cast<std::size_t>(n_vars), w);
  VectorField f = [g = std::move(g)](const Matrix& x, double t, const Vector& theta) -> Matrix {
    return g(x.col(0), t, theta);
  };
  return {weight, f};
}

/// Lifts a d x d Jacobian of a first-order field to the padded (d) x (d q) layout.
[[nodiscard]] inline Matrix pad_jacobian(const Matrix& jac, int n_deriv) {
  const Eigen::Index d = jac.rows();
  Matrix out = Matrix::Zero(d, d * n_deriv);
  for (Eigen::Index k = 0; k < jac.cols(); ++k) out.col(k * n_deriv) = jac.col(k);
  return out;
}

[[nodiscard]] inline Matrix pad_init(const Matrix& values, int q) {
  require(values.cols() <= q, "pad_init: more known derivatives than q");
  Matrix out = Matrix::Zero(values.rows(), q);
  out.leftCols(values.cols()) = values;
  return out;
}

/// The same problem viewed as one block of size d*q. Row k of X becomes
/// columns [k q, (k+1) q) of the single dense row.
[[nodiscard]] inline OdeProblem dense_problem(const OdeProblem& p) {
  const Eigen::Index d = p.n_vars();
  const Eigen::Index q = p.n_deriv();
  OdeProblem out;
  out.weight = {block_diag(p.weight)};
  out.init = stack_rows(p.init).transpose();
  out.t_min = p.t_min;
  out.t_max = p.t_max;
  out.params = p.params;
  out.field = [f = p.field, d, q](const Matrix& x, double t, const Vector& theta) -> Matrix {
    return stack_rows(f(unstack_rows(x.row(0).transpose(), d, q), t, theta)).transpose();
  };
  if (p.jacobian) {
    out.jacobian = [j = p.jacobian, d, q](const Matrix& x, double t, const Vector& theta) -> Matrix {
      return j(unstack_rows(x.row(0).transpose(), d, q), t, theta);
    };
  }
  return out;
}

}  // namespace rodeo
