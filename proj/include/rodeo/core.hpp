#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace rodeo {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Failure inside a linear-algebra or model evaluation: a matrix that should be
/// positive definite is not, a field returned NaN, and so on.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what, std::optional<int> step = std::nullopt)
      : std::runtime_error(what), detail_(what), step_(step) {}

  [[nodiscard]] const std::string& detail() const noexcept { return detail_; }
  [[nodiscard]] std::optional<int> step() const noexcept { return step_; }

  /// Copy of this error tagged with the solver step it came from. An existing
  /// tag wins so the innermost location survives rethrows.
  [[nodiscard]] NumericalError at_step(int n) const {
    if (step_) return *this;
    return NumericalError(detail_ + " (step " + std::to_string(n) + ")", n, detail_);
  }

 private:
  NumericalError(const std::string& what, int step, std::string detail)
      : std::runtime_error(what), detail_(std::move(detail)), step_(step) {}

  std::string detail_;
  std::optional<int> step_;
};

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

[[nodiscard]] inline bool all_finite(const Matrix& m) { return m.allFinite(); }

[[nodiscard]] inline Matrix symmetrize(const Matrix& m) { return 0.5 * (m + m.transpose()); }

[[nodiscard]] inline Matrix block_diag(const std::vector<Matrix>& blocks) {
  Eigen::Index rows = 0, cols = 0;
  for (const auto& b : blocks) {
    rows += b.rows();
    cols += b.cols();
  }
  Matrix out = Matrix::Zero(rows, cols);
  Eigen::Index r = 0, c = 0;
  for (const auto& b : blocks) {
    out.block(r, c, b.rows(), b.cols()) = b;
    r += b.rows();
    c += b.cols();
  }
  return out;
}

/// Rows of a d x q block state concatenated into one vector of length d*q.
/// This is the ordering used everywhere a blocked quantity is flattened.
[[nodiscard]] inline Vector stack_rows(const Matrix& x) {
  Vector out(x.size());
  for (Eigen::Index k = 0; k < x.rows(); ++k) out.segment(k * x.cols(), x.cols()) = x.row(k).transpose();
  return out;
}

[[nodiscard]] inline Matrix unstack_rows(const Vector& v, Eigen::Index rows, Eigen::Index cols) {
  if (v.size() != rows * cols) throw std::invalid_argument("unstack_rows: size mismatch");
  Matrix out(rows, cols);
  for (Eigen::Index k = 0; k < rows; ++k) out.row(k) = v.segment(k * cols, cols).transpose();
  return out;
}

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

}  // namespace rodeo
