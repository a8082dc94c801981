#include "rodeo/interrogate.hpp"
#include "rodeo/models.hpp"
#include "rodeo/solver.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace rodeo;
using rodeo::testing::Gen;
using rodeo::testing::max_abs;

namespace {

BlockState point_state(const Matrix& mu, KalmanType t = KalmanType::standard) {
  BlockState s;
  for (Eigen::Index k = 0; k < mu.rows(); ++k) s.push_back({mu.row(k).transpose(), Matrix::Zero(mu.cols(), mu.cols()), t});
  return s;
}

BlockState random_state(Gen& g, const Matrix& mu, KalmanType t = KalmanType::standard) {
  BlockState s;
  for (Eigen::Index k = 0; k < mu.rows(); ++k) s.push_back(make_state(mu.row(k).transpose(), g.spd(mu.cols()), t));
  return s;
}

OdeProblem scalar_problem(VectorField f, int q, int w_col) {
  OdeProblem p;
  Matrix w = Matrix::Zero(1, q);
  w(0, w_col) = 1.0;
  p.weight = {w};
  p.field = std::move(f);
  p.init = Matrix::Zero(1, q);
  return p;
}

OdeProblem fitz_problem() {
  const ModelDef& m = find_model("fitz");
  return m.problem(m.theta_true);
}

}  // namespace

TEST(Schober, ZeroField) {
  const OdeProblem p = scalar_problem([](const Matrix& x, double, const Vector&) { return Matrix::Zero(x.rows(), 1); }, 3, 1);
  Gen g(1);
  const Interrogation it = interrogate_schober(random_state(g, g.matrix(1, 3)), p, 0.4);
  EXPECT_EQ(max_abs(it.a[0]), 0.0);
  EXPECT_EQ(max_abs(it.b[0]), 0.0);
  EXPECT_EQ(max_abs(it.v[0]), 0.0);
}

TEST(Schober, ChkrebtiiFieldAtInitialMean) {
  const OdeProblem p = find_model("chkrebtii").problem(Vector(0));
  const Matrix mu = (Matrix(1, 4) << -1.0, 0.0, 1.0, 0.0).finished();
  const Interrogation it = interrogate_schober(point_state(mu), p, 0.0);
  // f = sin(0) - x^(0) = 1, so a = -f = -1.
  EXPECT_DOUBLE_EQ(it.a[0](0), -1.0);
}

TEST(Schober, FitzFieldAtInitialState) {
  const OdeProblem p = fitz_problem();
  const Interrogation it = interrogate_schober(point_state(p.init), p, 0.0);
  const Vector f = models::fitz_field(p.init.col(0), 0.0, p.params);
  for (int k = 0; k < 2; ++k) EXPECT_DOUBLE_EQ(it.a[k](0), -f(k));
}

TEST(Chkrebtii, DegenerateStateMatchesSchober) {
  const OdeProblem p = fitz_problem();
  const BlockState s = point_state(p.init);
  const Interrogation a = interrogate_chkrebtii(Key{1}, s, p, 0.0);
  const Interrogation b = interrogate_schober(s, p, 0.0);
  for (int k = 0; k < 2; ++k) {
    EXPECT_EQ(a.a[k], b.a[k]);
    EXPECT_EQ(max_abs(a.v[k]), 0.0);
  }
}

TEST(Chkrebtii, FixedKeyIsReproducible) {
  Gen g(2);
  const OdeProblem p = fitz_problem();
  const BlockState s = random_state(g, p.init);
  const Interrogation a = interrogate_chkrebtii(Key{3}, s, p, 0.0);
  const Interrogation b = interrogate_chkrebtii(Key{3}, s, p, 0.0);
  const Interrogation c = interrogate_chkrebtii(Key{4}, s, p, 0.0);
  EXPECT_EQ(a.a[0], b.a[0]);
  EXPECT_NE(a.a[0], c.a[0]);
}

TEST(Chkrebtii, VarianceIsQuadraticForm) {
  Gen g(3);
  const OdeProblem p = fitz_problem();
  for (auto t : {KalmanType::standard, KalmanType::square_root}) {
    const BlockState s = random_state(g, p.init, t);
    const Interrogation it = interrogate_chkrebtii(Key{5}, s, p, 0.0);
    for (int k = 0; k < 2; ++k) EXPECT_NEAR(it.v[k](0, 0), s[k].cov()(1, 1), 1e-12);
  }
}

TEST(Chkrebtii, VanishingCovarianceConvergesToSchober) {
  Gen g(4);
  const OdeProblem p = fitz_problem();
  BlockState s = random_state(g, p.init);
  for (auto& b : s) b.var *= 1e-14;
  const Interrogation a = interrogate_chkrebtii(Key{6}, s, p, 0.0);
  const Interrogation b = interrogate_schober(s, p, 0.0);
  for (int k = 0; k < 2; ++k) {
    EXPECT_LT(max_abs(a.a[k] - b.a[k]), 1e-5);
    EXPECT_LT(max_abs(a.v[k]), 1e-12);
  }
}

TEST(Tronarp, SquareFieldHandDerivative) {
  OdeProblem p = scalar_problem([](const Matrix& x, double, const Vector&) {
    return Matrix::Constant(1, 1, x(0, 0) * x(0, 0));
  }, 2, 1);
  const Matrix mu = (Matrix(1, 2) << 3.0, 0.0).finished();
  const Interrogation it = interrogate_tronarp(point_state(mu), p, 0.0);
  EXPECT_NEAR(it.a[0](0), 9.0, 1e-6);
  EXPECT_NEAR(it.b[0](0, 0), -6.0, 1e-6);
  EXPECT_NEAR(it.b[0](0, 1), 0.0, 1e-12);
}

TEST(Tronarp, LinearFieldIsExactSurrogate) {
  Gen g(5);
  for (int trial = 0; trial < 10; ++trial) {
    const Eigen::Index q = g.integer(2, 4);
    const Matrix lam = g.matrix(1, q);
    const double c = g.normal();
    OdeProblem p = scalar_problem([lam, c](const Matrix& x, double, const Vector&) {
      return Matrix::Constant(1, 1, (lam * x.row(0).transpose())(0) + c);
    }, static_cast<int>(q), static_cast<int>(q) - 1);
    const Interrogation it = interrogate_tronarp(random_state(g, g.matrix(1, q)), p, 0.0);
    for (int rep = 0; rep < 5; ++rep) {
      const Matrix x = g.matrix(1, q);
      const double lhs = (p.weight[0] * x.row(0).transpose())(0) - p.field(x, 0.0, p.params)(0, 0);
      const double rhs = ((p.weight[0] + it.b[0]) * x.row(0).transpose())(0) + it.a[0](0);
      EXPECT_NEAR(lhs, rhs, 1e-8) << trial;
    }
  }
}

TEST(Tronarp, FiniteDifferenceJacobianMatchesAnalytic) {
  OdeProblem analytic = fitz_problem();
  OdeProblem numeric = analytic;
  numeric.jacobian = nullptr;
  Gen g(6);
  const Matrix x = g.matrix(2, 3);
  EXPECT_LT(max_abs(field_jacobian(analytic, x, 0.0) - field_jacobian(numeric, x, 0.0)), 1e-6);
}

TEST(Tronarp, CoupledBlockedProblemRaises) {
  const OdeProblem p = fitz_problem();
  EXPECT_THROW((void)interrogate_tronarp(point_state(p.init), p, 0.0), std::invalid_argument);
}

TEST(Kramer, SingleVariableMatchesTronarp) {
  Gen g(7);
  const OdeProblem p = find_model("chkrebtii").problem(Vector(0));
  const BlockState s = random_state(g, p.init);
  const Interrogation a = interrogate_kramer(s, p, 0.7);
  const Interrogation b = interrogate_tronarp(s, p, 0.7);
  EXPECT_EQ(a.a[0], b.a[0]);
  EXPECT_EQ(a.b[0], b.b[0]);
}

TEST(Kramer, DecoupledSystemMatchesTronarp) {
  Gen g(8);
  OdeProblem p;
  Matrix w = Matrix::Zero(1, 3);
  w(0, 1) = 1.0;
  p.weight = {w, w};
  p.field = [](const Matrix& x, double, const Vector&) -> Matrix {
    return (Matrix(2, 1) << std::sin(x(0, 0)), x(1, 0) * x(1, 0)).finished();
  };
  p.init = g.matrix(2, 3);
  const BlockState s = random_state(g, p.init);
  const Interrogation a = interrogate_kramer(s, p, 0.0);
  const Interrogation b = interrogate_tronarp(s, p, 0.0);
  for (int k = 0; k < 2; ++k) {
    EXPECT_EQ(a.a[k], b.a[k]);
    EXPECT_EQ(a.b[k], b.b[k]);
  }
}

TEST(Kramer, FitzKeepsDiagonalSlices) {
  const OdeProblem p = fitz_problem();
  Gen g(9);
  const Matrix mu = g.matrix(2, 3);
  const Interrogation it = interrogate_kramer(point_state(mu), p, 0.0);
  const Matrix j = models::fitz_jacobian(mu.col(0), p.params);
  // -d f_k / d X_k: only the x^(0) column is nonzero.
  EXPECT_NEAR(it.b[0](0, 0), -j(0, 0), 1e-12);
  EXPECT_NEAR(it.b[1](0, 0), -j(1, 1), 1e-12);
  EXPECT_EQ(max_abs(it.b[0].rightCols(2)), 0.0);
  EXPECT_EQ(max_abs(it.b[1].rightCols(2)), 0.0);
  const Vector f = models::fitz_field(mu.col(0), 0.0, p.params);
  EXPECT_NEAR(it.a[0](0), -f(0) + j(0, 0) * mu(0, 0), 1e-12);
}

TEST(Interrogate, UnimplementedMethodRaises) {
  const OdeProblem p = fitz_problem();
  EXPECT_THROW((void)interrogate(InterrogationMethod::kersting_hennig, Key{}, point_state(p.init), p, 0.0),
               std::invalid_argument);
  EXPECT_THROW((void)interrogation_from_string("euler"), std::invalid_argument);
  EXPECT_EQ(interrogation_from_string("kramer"), InterrogationMethod::kramer);
}

TEST(Interrogate, NonFiniteFieldRaises) {
  const OdeProblem p = scalar_problem([](const Matrix&, double, const Vector&) {
    return Matrix::Constant(1, 1, std::nan(""));
  }, 2, 1);
  EXPECT_THROW((void)interrogate_schober(point_state(Matrix::Zero(1, 2)), p, 0.0), NumericalError);
}

// x' = y, y' = 1 from x = 0, y = 0 with fully specified derivatives: the
// solution t^2 / 2, t lies in the span of the prior mean, so linearized
// surrogates reproduce it to rounding.
TEST(LinearizedProperty, LinearFieldSolvedExactly) {
  OdeProblem p;
  Matrix w = Matrix::Zero(1, 3);
  w(0, 1) = 1.0;
  p.weight = {w, w};
  p.field = [](const Matrix& x, double, const Vector&) -> Matrix {
    return (Matrix(2, 1) << x(1, 0), 1.0).finished();
  };
  p.jacobian = [](const Matrix&, double, const Vector&) -> Matrix {
    Matrix j = Matrix::Zero(2, 6);
    j(0, 3) = 1.0;
    return j;
  };
  p.init = (Matrix(2, 3) << 0.0, 0.0, 1.0, 0.0, 1.0, 0.0).finished();
  p.t_min = 0.0;
  p.t_max = 2.0;
  for (auto m : {InterrogationMethod::tronarp, InterrogationMethod::kramer}) {
    SolverSpec spec;
    spec.n_steps = 100;
    spec.interrogation = m;
    const SolutionPosterior post = solve_mv(p, ibm_init(0.02, 3, {1.0, 1.0}), spec);
    double err = 0.0;
    for (std::size_t n = 0; n < post.times.size(); ++n) {
      const double t = post.times[n];
      err = std::max(err, std::abs(post.means[n](0, 0) - 0.5 * t * t));
      err = std::max(err, std::abs(post.means[n](1, 0) - t));
    }
    EXPECT_LT(err, 1e-6) << to_string(m);
  }
}
