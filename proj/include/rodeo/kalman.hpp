/**
 * @file kalman.hpp
 * @brief Gaussian state-space primitives in covariance and square-root form.
 *
 * Every primitive dispatches on GaussState::type. In square-root form `var`
 * holds a lower-triangular factor L with cov = L L'; noise inputs are always
 * passed as covariances and factorized on entry.
 */
#pragma once

#include "rodeo/core.hpp"
#include "rodeo/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <type_traits>
#include <vector>

namespace rodeo {

enum class KalmanType { standard, square_root };

struct GaussState {
  Vector mean;
  Matrix var;
  KalmanType type = KalmanType::standard;

  [[nodiscard]] Matrix cov() const {
    if (type == KalmanType::standard) return var;
    return var * var.transpose();
  }
  [[nodiscard]] Eigen::Index dim() const { return mean.size(); }
};

/// X_n | X_{n+1} ~ N(gain X_{n+1} + offset, C); `var` is C or its factor.
struct AffineCond {
  Matrix gain;
  Vector offset;
  Matrix var;
  KalmanType type = KalmanType::standard;

  [[nodiscard]] Matrix cov() const {
    if (type == KalmanType::standard) return var;
    return var * var.transpose();
  }
};

using BlockState = std::vector<GaussState>;

namespace linalg {

/// Cholesky of a symmetric matrix that must be positive definite. One retry
/// with 1e-10 * trace jitter, then a NumericalError naming `what`.
[[nodiscard]] inline Eigen::LLT<Matrix> chol(const Matrix& m, const std::string& what) {
  Matrix s = symmetrize(m);
  if (!s.allFinite()) throw NumericalError(what + " has non-finite entries");
  Eigen::LLT<Matrix> llt(s);
  if (llt.info() == Eigen::Success) return llt;
  const double jitter = 1e-10 * s.trace();
  if (jitter > 0.0) {
    s.diagonal().array() += jitter;
    llt.compute(s);
    if (llt.info() == Eigen::Success) return llt;
  }
  throw NumericalError(what + " is not positive definite");
}

/// Any F with F F' = m for symmetric PSD m, including singular m.
[[nodiscard]] inline Matrix psd_factor(const Matrix& m, const std::string& what = "covariance") {
  const Eigen::Index n = m.rows();
  if (n == 0) return Matrix(0, 0);
  Matrix s = symmetrize(m);
  if (!s.allFinite()) throw NumericalError(what + " has non-finite entries");
  if (s.isZero(0.0)) return Matrix::Zero(n, n);
  Eigen::LLT<Matrix> llt(s);
  if (llt.info() == Eigen::Success) return llt.matrixL();
  Eigen::LDLT<Matrix> ldlt(s);
  if (ldlt.info() != Eigen::Success) throw NumericalError(what + " could not be factorized");
  const double tol = 1e-10 * std::max(s.trace(), 0.0);
  Vector dv = ldlt.vectorD();
  if ((dv.array() < -tol).any()) throw NumericalError(what + " is not positive semi-definite");
  dv = dv.cwiseMax(0.0).cwiseSqrt();
  Matrix l = ldlt.matrixL();
  Matrix f = ldlt.transpositionsP().transpose() * (l * dv.asDiagonal());
  return f;
}

/// Lower-triangular L (rows(m) square) with L L' = m m', via QR of m'.
[[nodiscard]] inline Matrix tria(const Matrix& m) {
  const Eigen::Index p = m.rows();
  const Eigen::Index k = m.cols();
  Matrix mt = Matrix::Zero(std::max(k, p), p);
  mt.topRows(k) = m.transpose();
  Eigen::HouseholderQR<Matrix> qr(mt);
  Matrix r = qr.matrixQR().topRows(p).triangularView<Eigen::Upper>();
  Matrix l = r.transpose();
  for (Eigen::Index j = 0; j < p; ++j)
    if (l(j, j) < 0.0) l.col(j) *= -1.0;
  return l;
}

/// Indices of rows with at least one nonzero entry in either matrix.
[[nodiscard]] inline std::vector<Eigen::Index> informative_rows(const Matrix& w, const Matrix& v) {
  std::vector<Eigen::Index> out;
  for (Eigen::Index i = 0; i < w.rows(); ++i)
    if (!w.row(i).isZero(0.0) || !v.row(i).isZero(0.0)) out.push_back(i);
  return out;
}

[[nodiscard]] inline Matrix take_rows(const Matrix& m, const std::vector<Eigen::Index>& idx) {
  Matrix out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(idx[i]);
  return out;
}

[[nodiscard]] inline Matrix take(const Matrix& m, const std::vector<Eigen::Index>& idx) {
  const auto n = static_cast<Eigen::Index>(idx.size());
  Matrix out(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) out(i, j) = m(idx[i], idx[j]);
  return out;
}

[[nodiscard]] inline Vector take(const Vector& v, const std::vector<Eigen::Index>& idx) {
  Vector out(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out(static_cast<Eigen::Index>(i)) = v(idx[i]);
  return out;
}

[[nodiscard]] inline double log2pi() { return std::log(2.0 * std::numbers::pi); }

}  // namespace linalg

[[nodiscard]] inline GaussState make_state(Vector mean, const Matrix& cov,
                                           KalmanType type = KalmanType::standard) {
  require(cov.rows() == mean.size() && cov.cols() == mean.size(), "make_state: dimension mismatch");
  if (type == KalmanType::standard) return {std::move(mean), symmetrize(cov), type};
  return {std::move(mean), linalg::tria(linalg::psd_factor(cov)), type};
}

[[nodiscard]] inline GaussState convert(const GaussState& s, KalmanType type) {
  if (s.type == type) return s;
  return make_state(s.mean, s.cov(), type);
}

/// log N(x; mean, cov). Coordinates whose covariance row is identically zero are
/// point masses: they contribute 0 when the residual vanishes and -inf otherwise.
[[nodiscard]] inline double mvn_logpdf(const Vector& x, const Vector& mean, const Matrix& cov) {
  require(x.size() == mean.size() && cov.rows() == x.size() && cov.cols() == x.size(),
          "mvn_logpdf: dimension mismatch");
  const Vector r = x - mean;
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    if (cov.row(i).isZero(0.0) && cov.col(i).isZero(0.0)) {
      if (r(i) != 0.0) return kNegInf;
    } else {
      keep.push_back(i);
    }
  }
  if (keep.empty()) return 0.0;
  const auto llt = linalg::chol(linalg::take(cov, keep), "mvn_logpdf covariance");
  const Vector rk = linalg::take(r, keep);
  const Vector w = llt.matrixL().solve(rk);
  const Matrix& lm = llt.matrixLLT();
  double logdet = 0.0;
  for (Eigen::Index i = 0; i < lm.rows(); ++i) logdet += 2.0 * std::log(lm(i, i));
  return -0.5 * (static_cast<double>(keep.size()) * linalg::log2pi() + logdet + w.squaredNorm());
}

/// Density on the range of a covariance known to have exactly `nullity` null
/// directions: the smallest `nullity` eigen-directions are discarded.
[[nodiscard]] inline double mvn_logpdf_reduced(const Vector& x, const Vector& mean, const Matrix& cov,
                                               Eigen::Index nullity) {
  require(nullity >= 0 && nullity <= x.size(), "mvn_logpdf_reduced: bad nullity");
  if (nullity == 0) return mvn_logpdf(x, mean, cov);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(symmetrize(cov));
  if (eig.info() != Eigen::Success) throw NumericalError("mvn_logpdf_reduced: eigendecomposition failed");
  const Vector r = eig.eigenvectors().transpose() * (x - mean);
  const Vector& lam = eig.eigenvalues();
  double acc = 0.0;
  for (Eigen::Index i = nullity; i < lam.size(); ++i) {
    if (!(lam(i) > 0.0)) throw NumericalError("mvn_logpdf_reduced: covariance rank below expected");
    acc += linalg::log2pi() + std::log(lam(i)) + r(i) * r(i) / lam(i);
  }
  return -0.5 * acc;
}

[[nodiscard]] inline double logpdf(const Vector& x, const GaussState& s) { return mvn_logpdf(x, s.mean, s.cov()); }

[[nodiscard]] inline Vector mvn_sample(Key key, const Vector& mean, const Matrix& cov) {
  require(cov.rows() == mean.size() && cov.cols() == mean.size(), "mvn_sample: dimension mismatch");
  return mean + linalg::psd_factor(cov, "mvn_sample covariance") * standard_normal(key, mean.size());
}

[[nodiscard]] inline Vector sample(Key key, const GaussState& s) {
  if (s.type == KalmanType::standard) return mvn_sample(key, s.mean, s.var);
  return s.mean + s.var * standard_normal(key, s.mean.size());
}

[[nodiscard]] inline GaussState predict(const GaussState& s, const Vector& drift, const Matrix& trans,
                                        const Matrix& noise) {
  const Eigen::Index p = s.dim();
  require(trans.cols() == p && drift.size() == trans.rows() && noise.rows() == trans.rows() &&
              noise.cols() == trans.rows(),
          "predict: dimension mismatch");
  GaussState out;
  out.type = s.type;
  out.mean = trans * s.mean + drift;
  if (s.type == KalmanType::standard) {
    out.var = symmetrize(trans * s.var * trans.transpose() + noise);
  } else {
    Matrix pre(trans.rows(), p + noise.rows());
    pre << trans * s.var, linalg::psd_factor(noise, "predict noise");
    out.var = linalg::tria(pre);
  }
  return out;
}

/// Condition on z = W x + a + e, e ~ N(0, V). Rows where both W and V vanish
/// carry no information and are dropped before factorizing.
[[nodiscard]] inline GaussState update(const GaussState& s, const Vector& z, const Vector& a, const Matrix& w,
                                       const Matrix& v) {
  const Eigen::Index p = s.dim();
  require(w.cols() == p && z.size() == w.rows() && a.size() == w.rows() && v.rows() == w.rows() &&
              v.cols() == w.rows(),
          "update: dimension mismatch");
  const auto rows = linalg::informative_rows(w, v);
  if (rows.empty() || s.var.isZero(0.0)) return s;
  const Matrix wa = linalg::take_rows(w, rows);
  const Matrix va = linalg::take(v, rows);
  const Vector innov = linalg::take(Vector(z - a), rows) - wa * s.mean;
  const auto r = static_cast<Eigen::Index>(rows.size());
  GaussState out;
  out.type = s.type;
  if (s.type == KalmanType::standard) {
    const Matrix swt = s.var * wa.transpose();
    const auto llt = linalg::chol(wa * swt + va, "innovation covariance");
    const Matrix gain = llt.solve(swt.transpose()).transpose();
    out.mean = s.mean + gain * innov;
    out.var = symmetrize(s.var - gain * swt.transpose());
  } else {
    Matrix pre = Matrix::Zero(r + p, r + p);
    pre.topLeftCorner(r, r) = linalg::psd_factor(va, "update noise");
    pre.topRightCorner(r, p) = wa * s.var;
    pre.bottomRightCorner(p, p) = s.var;
    const Matrix post = linalg::tria(pre);
    const Matrix x = post.topLeftCorner(r, r);
    const double scale = pre.norm();
    for (Eigen::Index i = 0; i < r; ++i)
      if (!(std::abs(x(i, i)) > 1e-15 * scale)) throw NumericalError("innovation covariance is not positive definite");
    const Vector w_solved = x.triangularView<Eigen::Lower>().solve(innov);
    out.mean = s.mean + post.bottomLeftCorner(p, r) * w_solved;
    out.var = post.bottomRightCorner(p, p);
  }
  return out;
}

[[nodiscard]] inline GaussState forecast(const GaussState& s, const Vector& a, const Matrix& w, const Matrix& v) {
  require(w.cols() == s.dim() && a.size() == w.rows() && v.rows() == w.rows() && v.cols() == w.rows(),
          "forecast: dimension mismatch");
  GaussState out;
  out.type = s.type;
  out.mean = w * s.mean + a;
  if (s.type == KalmanType::standard) {
    out.var = symmetrize(w * s.var * w.transpose() + v);
  } else {
    Matrix pre(w.rows(), s.dim() + v.rows());
    pre << w * s.var, linalg::psd_factor(v, "forecast noise");
    out.var = linalg::tria(pre);
  }
  return out;
}

/// Backward kernel of X_n given X_{n+1}. `noise` is the R used to form
/// `predicted`; only the square-root form reads it.
[[nodiscard]] inline AffineCond condition(const GaussState& filtered, const GaussState& predicted,
                                          const Matrix& trans, const Matrix& noise) {
  const Eigen::Index p = filtered.dim();
  require(trans.cols() == p && trans.rows() == predicted.dim(), "condition: dimension mismatch");
  AffineCond out;
  out.type = filtered.type;
  const Eigen::Index pn = predicted.dim();
  if (filtered.var.isZero(0.0) || trans.isZero(0.0)) {
    out.gain = Matrix::Zero(p, pn);
    out.offset = filtered.mean;
    out.var = filtered.var;
    return out;
  }
  if (filtered.type == KalmanType::standard) {
    const Matrix qs = trans * filtered.var;
    const auto llt = linalg::chol(predicted.var, "predicted covariance");
    out.gain = llt.solve(qs).transpose();
    out.var = symmetrize(filtered.var - out.gain * qs);
  } else {
    require(noise.rows() == pn && noise.cols() == pn, "condition: noise dimension mismatch");
    Matrix pre = Matrix::Zero(pn + p, p + pn);
    pre.topLeftCorner(pn, p) = trans * filtered.var;
    pre.topRightCorner(pn, pn) = linalg::psd_factor(noise, "transition noise");
    pre.bottomLeftCorner(p, p) = filtered.var;
    const Matrix post = linalg::tria(pre);
    const Matrix lp = post.topLeftCorner(pn, pn);
    const double scale = pre.norm();
    for (Eigen::Index i = 0; i < pn; ++i)
      if (!(std::abs(lp(i, i)) > 1e-15 * scale)) throw NumericalError("predicted covariance is not positive definite");
    const Matrix g = post.bottomLeftCorner(p, pn);
    out.gain = lp.transpose().triangularView<Eigen::Upper>().solve(g.transpose()).transpose();
    out.var = post.bottomRightCorner(p, p);
  }
  out.offset = filtered.mean - out.gain * predicted.mean;
  return out;
}

/// N(gain m + offset, gain S gain' + C) for s = N(m, S).
[[nodiscard]] inline GaussState push(const AffineCond& c, const GaussState& s) {
  require(c.gain.cols() == s.dim(), "push: dimension mismatch");
  GaussState out;
  out.type = s.type;
  out.mean = c.gain * s.mean + c.offset;
  if (s.type == KalmanType::standard) {
    out.var = symmetrize(c.gain * s.var * c.gain.transpose() + c.cov());
  } else {
    const Matrix cf = c.type == KalmanType::square_root ? c.var : linalg::psd_factor(c.var);
    Matrix pre(c.gain.rows(), s.dim() + cf.cols());
    pre << c.gain * s.var, cf;
    out.var = linalg::tria(pre);
  }
  return out;
}

[[nodiscard]] inline GaussState smooth(const GaussState& next_smoothed, const GaussState& filtered,
                                       const GaussState& predicted, const Matrix& trans, const Matrix& noise) {
  require(next_smoothed.dim() == predicted.dim(), "smooth: dimension mismatch");
  const AffineCond c = condition(filtered, predicted, trans, noise);
  return push(c, next_smoothed);
}

[[nodiscard]] inline Vector sample_back(Key key, const Vector& next_draw, const GaussState& filtered,
                                        const GaussState& predicted, const Matrix& trans, const Matrix& noise) {
  const AffineCond c = condition(filtered, predicted, trans, noise);
  const Vector mu = c.gain * next_draw + c.offset;
  if (c.type == KalmanType::square_root) return mu + c.var * standard_normal(key, mu.size());
  return mvn_sample(key, mu, c.var);
}

/// Applies `op` to the k-th element of every list, k = 0..d-1.
template <class F, class First, class... Rest>
[[nodiscard]] auto block_map(F&& op, const std::vector<First>& first, const std::vector<Rest>&... rest) {
  const std::size_t d = first.size();
  if (((rest.size() != d) || ...)) throw std::invalid_argument("block_map: block lists differ in length");
  using R = std::decay_t<decltype(op(first[0], rest[0]...))>;
  std::vector<R> out;
  out.reserve(d);
  for (std::size_t k = 0; k < d; ++k) out.push_back(op(first[k], rest[k]...));
  return out;
}

/// One state holding the block-diagonal joint of independent blocks.
[[nodiscard]] inline GaussState dense_state(const BlockState& blocks) {
  require(!blocks.empty(), "dense_state: no blocks");
  std::vector<Matrix> vars;
  Eigen::Index n = 0;
  for (const auto& b : blocks) {
    require(b.type == blocks.front().type, "dense_state: mixed kalman types");
    vars.push_back(b.var);
    n += b.dim();
  }
  Vector mean(n);
  Eigen::Index off = 0;
  for (const auto& b : blocks) {
    mean.segment(off, b.dim()) = b.mean;
    off += b.dim();
  }
  return {mean, block_diag(vars), blocks.front().type};
}

}  // namespace rodeo
