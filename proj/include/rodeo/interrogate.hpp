#pragma once

#include "rodeo/core.hpp"
#include "rodeo/kalman.hpp"
#include "rodeo/numdiff.hpp"
#include "rodeo/prior.hpp"
#include "rodeo/rng.hpp"

#include <string>
#include <vector>

namespace rodeo {

enum class InterrogationMethod { schober, chkrebtii, tronarp, kramer, kersting_hennig };

[[nodiscard]] inline std::string to_string(InterrogationMethod m) {
  switch (m) {
    case InterrogationMethod::schober: return "schober";
    case InterrogationMethod::chkrebtii: return "chkrebtii";
    case InterrogationMethod::tronarp: return "tronarp";
    case InterrogationMethod::kramer: return "kramer";
    case InterrogationMethod::kersting_hennig: return "kersting_hennig";
  }
  return "unknown";
}

[[nodiscard]] inline InterrogationMethod interrogation_from_string(const std::string& s) {
  for (auto m : {InterrogationMethod::schober, InterrogationMethod::chkrebtii, InterrogationMethod::tronarp,
                 InterrogationMethod::kramer, InterrogationMethod::kersting_hennig})
    if (to_string(m) == s) return m;
  throw std::invalid_argument("interrogation: unknown method '" + s + "'");
}

/// Surrogate observation 0 = (W + B) X + a + N(0, V), one entry per block.
struct Interrogation {
  std::vector<Vector> a;
  std::vector<Matrix> b;
  std::vector<Matrix> v;
};

[[nodiscard]] inline Matrix state_means(const BlockState& s) {
  require(!s.empty(), "state_means: empty block state");
  Matrix out(static_cast<Eigen::Index>(s.size()), s.front().dim());
  for (std::size_t k = 0; k < s.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = s[k].mean.transpose();
  return out;
}

namespace detail {

inline Matrix eval_field(const VectorField& f, const Matrix& x, double t, const Vector& theta) {
  Matrix out = f(x, t, theta);
  if (!out.allFinite()) throw NumericalError("vector field returned non-finite values");
  if (out.rows() != x.rows()) throw std::invalid_argument("vector field must return one row per variable");
  return out;
}

inline Interrogation zero_slopes(const Matrix& fx, const std::vector<Matrix>& weight) {
  Interrogation out;
  const Eigen::Index r = fx.cols();
  for (std::size_t k = 0; k < weight.size(); ++k) {
    out.a.push_back(-fx.row(static_cast<Eigen::Index>(k)).transpose());
    out.b.push_back(Matrix::Zero(r, weight[k].cols()));
    out.v.push_back(Matrix::Zero(r, r));
  }
  return out;
}

}  // namespace detail

/// Full Jacobian at x, analytic when the problem supplies one.
[[nodiscard]] inline Matrix field_jacobian(const OdeProblem& p, const Matrix& x, double t,
                                           const FdConfig& fd = {}) {
  if (p.jacobian) {
    Matrix j = p.jacobian(x, t, p.params);
    if (!j.allFinite()) throw NumericalError("jacobian returned non-finite values");
    return j;
  }
  const Eigen::Index d = x.rows(), q = x.cols();
  auto flat = [&](const Vector& v) -> Vector {
    return stack_rows(detail::eval_field(p.field, unstack_rows(v, d, q), t, p.params));
  };
  return fd_jac(flat, stack_rows(x), fd);
}

[[nodiscard]] inline Interrogation interrogate_schober(const BlockState& pred, const OdeProblem& p, double t) {
  const Matrix fx = detail::eval_field(p.field, state_means(pred), t, p.params);
  return detail::zero_slopes(fx, p.weight);
}

[[nodiscard]] inline Interrogation interrogate_chkrebtii(Key key, const BlockState& pred, const OdeProblem& p,
                                                         double t) {
  Matrix xs(static_cast<Eigen::Index>(pred.size()), pred.front().dim());
  for (std::size_t k = 0; k < pred.size(); ++k)
    xs.row(static_cast<Eigen::Index>(k)) = sample(split(key, k), pred[k]).transpose();
  const Matrix fx = detail::eval_field(p.field, xs, t, p.params);
  Interrogation out = detail::zero_slopes(fx, p.weight);
  for (std::size_t k = 0; k < pred.size(); ++k) {
    if (pred[k].type == KalmanType::standard) {
      out.v[k] = symmetrize(p.weight[k] * pred[k].var * p.weight[k].transpose());
    } else {
      const Matrix wl = p.weight[k] * pred[k].var;
      out.v[k] = wl * wl.transpose();
    }
  }
  return out;
}

namespace detail {
inline Interrogation linearized(const BlockState& pred, const OdeProblem& p, double t, const FdConfig& fd,
                                bool keep_cross) {
  const Matrix mu = state_means(pred);
  const Matrix fx = eval_field(p.field, mu, t, p.params);
  const Matrix jac = field_jacobian(p, mu, t, fd);
  const Eigen::Index d = mu.rows(), q = mu.cols(), r = fx.cols();
  require(jac.rows() == d * r && jac.cols() == d * q, "jacobian has wrong shape");
  if (keep_cross && d > 1) {
    bool coupled = false;
    for (Eigen::Index k = 0; k < d && !coupled; ++k)
      for (Eigen::Index l = 0; l < d && !coupled; ++l)
        if (k != l && !jac.block(k * r, l * q, r, q).isZero(0.0)) coupled = true;
    if (coupled)
      throw std::invalid_argument("tronarp interrogation with cross-variable Jacobian requires the dense solver path");
  }
  Interrogation out;
  for (Eigen::Index k = 0; k < d; ++k) {
    const Matrix jk = jac.block(k * r, k * q, r, q);
    out.a.push_back(-fx.row(k).transpose() + jk * mu.row(k).transpose());
    out.b.push_back(-jk);
    out.v.push_back(Matrix::Zero(r, r));
  }
  return out;
}
}  // namespace detail

/// Full first-order linearization. With coupled variables the surrogate only
/// fits the blocked layout when d == 1, i.e. on the dense path.
[[nodiscard]] inline Interrogation interrogate_tronarp(const BlockState& pred, const OdeProblem& p, double t,
                                                       const FdConfig& fd = {}) {
  return detail::linearized(pred, p, t, fd, true);
}

/// Linearization keeping only d f_k / d X_k.
[[nodiscard]] inline Interrogation interrogate_kramer(const BlockState& pred, const OdeProblem& p, double t,
                                                      const FdConfig& fd = {}) {
  return detail::linearized(pred, p, t, fd, false);
}

[[nodiscard]] inline Interrogation interrogate(InterrogationMethod m, Key key, const BlockState& pred,
                                               const OdeProblem& p, double t, const FdConfig& fd = {}) {
  switch (m) {
    case InterrogationMethod::schober: return interrogate_schober(pred, p, t);
    case InterrogationMethod::chkrebtii: return interrogate_chkrebtii(key, pred, p, t);
    case InterrogationMethod::tronarp: return interrogate_tronarp(pred, p, t, fd);
    case InterrogationMethod::kramer: return interrogate_kramer(pred, p, t, fd);
    case InterrogationMethod::kersting_hennig: break;
  }
  throw std::invalid_argument("interrogation 'kersting_hennig' is unimplemented");
}

}  // namespace rodeo
