/**
 * @file models.hpp
 * @brief Built-in benchmark models (Chkrebtii, FitzHugh-Nagumo, Hes1,
 *        SEIRAH), their measurement laws, data simulation and the
 *        unconstrained parameterization used by the inference front end.
 */
#pragma once

#include "rodeo/baselines.hpp"
#include "rodeo/core.hpp"
#include "rodeo/inference.hpp"
#include "rodeo/prior.hpp"
#include "rodeo/rng.hpp"
#include "rodeo/samplers.hpp"
#include "rodeo/solver.hpp"

#include <cmath>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace rodeo {

struct ModelDef {
  std::string name;
  std::vector<std::string> var_names;
  std::vector<std::string> theta_names;  // natural scale
  Vector theta_true;
  std::vector<bool> positive;  // log-transformed in the unconstrained space
  int n_vars = 1;
  int n_deriv = 3;
  double t_min = 0.0;
  double t_max = 1.0;
  double sigma = 0.1;  // default IBM scale
  double phi = 0.0;    // Gaussian measurement sd (0 for non-Gaussian laws)

  std::function<OdeProblem(const Vector&)> problem;
  std::function<OdeRhs(const Vector&)> rhs;  // first-order form for the baselines
  std::function<Vector(const Vector&)> x0;
  /// rhs component holding x^(0) of each solver variable.
  std::vector<int> rhs_index;

  std::vector<double> obs_times;
  std::function<GaussObsModel(const Vector&, double)> gauss_obs;  // empty for non-Gaussian laws
  std::function<GenObsModel(const Vector&)> gen_obs;
  /// Draws Y_i from the measurement law given x^(0) of each variable, per time.
  std::function<ObsData(Key, const Vector&, const std::vector<Vector>&)> draw_obs;

  [[nodiscard]] bool has_obs() const { return !obs_times.empty(); }
  [[nodiscard]] bool gaussian() const { return static_cast<bool>(gauss_obs); }
  [[nodiscard]] double obs_spacing() const { return obs_times.size() > 1 ? obs_times[1] - obs_times[0] : 0.0; }

  [[nodiscard]] ObsModel obs_model(const Vector& theta) const {
    if (gaussian()) return gauss_obs(theta, phi);
    return gen_obs(theta);
  }
  [[nodiscard]] GenObsModel generic_obs(const Vector& theta) const {
    return gaussian() ? as_generic(gauss_obs(theta, phi)) : gen_obs(theta);
  }
};

[[nodiscard]] inline double closed_form_chkrebtii(double t) {
  return (2.0 * std::sin(t) - 3.0 * std::cos(t) - std::sin(2.0 * t)) / 3.0;
}

namespace models {

inline std::vector<double> regular_times(double t0, double step, int count) {
  std::vector<double> out;
  for (int i = 0; i < count; ++i) out.push_back(t0 + i * step);
  return out;
}

/// x^(0) of each variable read from a first-order field at the padded init.
inline Matrix first_order_init(const FirstOrderField& g, const Vector& x0, double t0, const Vector& theta, int q) {
  Matrix v(x0.size(), 2);
  v.col(0) = x0;
  v.col(1) = g(x0, t0, theta);
  return pad_init(v, q);
}

inline OdeProblem first_order_problem(const FirstOrderField& g, const Vector& x0, const Vector& theta, int q,
                                      double t_min, double t_max) {
  auto [weight, field] = first_order_pad(g, static_cast<int>(x0.size()), q);
  OdeProblem p;
  p.weight = weight;
  p.field = field;
  p.init = first_order_init(g, x0, t_min, theta, q);
  p.t_min = t_min;
  p.t_max = t_max;
  p.params = theta;
  return p;
}

/// Gaussian measurement of x^(0) per variable with sd phi; `observed(i, k)`
/// masks components absent at time i.
template <class Observed>
GaussObsModel gauss_x0_obs(const std::vector<double>& times, int d, int q, double phi, Observed&& observed) {
  GaussObsModel out;
  out.times = times;
  for (std::size_t i = 0; i < times.size(); ++i) {
    std::vector<Matrix> w, v;
    for (int k = 0; k < d; ++k) {
      Matrix wk = Matrix::Zero(1, q), vk = Matrix::Zero(1, 1);
      if (observed(static_cast<int>(i), k)) {
        wk(0, 0) = 1.0;
        vk(0, 0) = phi * phi;
      }
      w.push_back(wk);
      v.push_back(vk);
    }
    out.weight.push_back(w);
    out.var.push_back(v);
  }
  return out;
}

template <class Observed>
ObsData draw_gauss(Key key, const std::vector<Vector>& values, double phi, Observed&& observed) {
  ObsData out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const Vector eps = standard_normal(split(key, i), values[i].size());
    Matrix y = Matrix::Zero(values[i].size(), 1);
    for (Eigen::Index k = 0; k < values[i].size(); ++k)
      if (observed(static_cast<int>(i), static_cast<int>(k))) y(k, 0) = values[i](k) + phi * eps(k);
    out.push_back(y);
  }
  return out;
}

inline double poisson_logpmf(double y, double rate) {
  if (!(rate > 0.0)) return (rate == 0.0 && y == 0.0) ? 0.0 : kNegInf;
  return y * std::log(rate) - rate - std::lgamma(y + 1.0);
}

// --- Chkrebtii: x'' = sin(2t) - x on [0, 10] -------------------------------

inline ModelDef chkrebtii() {
  ModelDef m;
  m.name = "chkrebtii";
  m.var_names = {"x"};
  m.n_vars = 1;
  m.n_deriv = 4;
  m.t_min = 0.0;
  m.t_max = 10.0;
  m.sigma = 0.1;
  m.theta_true = Vector(0);
  m.problem = [](const Vector& theta) {
    OdeProblem p;
    Matrix w = Matrix::Zero(1, 4);
    w(0, 2) = 1.0;
    p.weight = {w};
    p.field = [](const Matrix& x, double t, const Vector&) -> Matrix {
      Matrix out(1, 1);
      out(0, 0) = std::sin(2.0 * t) - x(0, 0);
      return out;
    };
    p.jacobian = [](const Matrix&, double, const Vector&) -> Matrix {
      Matrix j = Matrix::Zero(1, 4);
      j(0, 0) = -1.0;
      return j;
    };
    p.init = Matrix(1, 4);
    p.init << -1.0, 0.0, 1.0, 0.0;
    p.t_min = 0.0;
    p.t_max = 10.0;
    p.params = theta;
    return p;
  };
  m.rhs = [](const Vector&) -> OdeRhs {
    return [](const Vector& x, double t) {
      Vector out(2);
      out << x(1), std::sin(2.0 * t) - x(0);
      return out;
    };
  };
  m.x0 = [](const Vector&) {
    Vector v(2);
    v << -1.0, 0.0;
    return v;
  };
  m.rhs_index = {0};
  return m;
}

// --- FitzHugh-Nagumo -------------------------------------------------------

inline Vector fitz_field(const Vector& x, double, const Vector& theta) {
  const double a = theta(0), b = theta(1), c = theta(2);
  Vector out(2);
  out << c * (x(0) - x(0) * x(0) * x(0) / 3.0 + x(1)), -(x(0) - a + b * x(1)) / c;
  return out;
}

inline Matrix fitz_jacobian(const Vector& x, const Vector& theta) {
  const double b = theta(1), c = theta(2);
  Matrix j(2, 2);
  j << c * (1.0 - x(0) * x(0)), c, -1.0 / c, -b / c;
  return j;
}

inline ModelDef fitz() {
  ModelDef m;
  m.name = "fitz";
  m.var_names = {"V", "R"};
  m.theta_names = {"a", "b", "c", "V0", "R0"};
  m.theta_true = Vector(5);
  m.theta_true << 0.2, 0.2, 3.0, -1.0, 1.0;
  m.positive = {true, true, true, false, false};
  m.n_vars = 2;
  m.n_deriv = 3;
  m.t_min = 0.0;
  m.t_max = 40.0;
  m.sigma = 0.1;
  m.phi = 0.2;
  m.problem = [q = m.n_deriv](const Vector& theta) {
    OdeProblem p = first_order_problem(fitz_field, theta.tail(2), theta.head(3), q, 0.0, 40.0);
    p.jacobian = [q](const Matrix& x, double, const Vector& th) { return pad_jacobian(fitz_jacobian(x.col(0), th), q); };
    return p;
  };
  m.rhs = [](const Vector& theta) -> OdeRhs {
    const Vector th = theta.head(3);
    return [th](const Vector& x, double t) { return fitz_field(x, t, th); };
  };
  m.x0 = [](const Vector& theta) -> Vector { return theta.tail(2); };
  m.rhs_index = {0, 1};
  m.obs_times = regular_times(0.0, 1.0, 41);
  auto all = [](int, int) { return true; };
  m.gauss_obs = [times = m.obs_times, q = m.n_deriv, all](const Vector&, double phi) {
    return gauss_x0_obs(times, 2, q, phi, all);
  };
  m.draw_obs = [phi = m.phi, all](Key key, const Vector&, const std::vector<Vector>& values) {
    return draw_gauss(key, values, phi, all);
  };
  return m;
}

// --- Hes1 (log scale, minutes) ---------------------------------------------

inline Vector hes1_field(const Vector& x, double, const Vector& th) {
  const double p = std::exp(x(0)), mm = std::exp(x(1)), h = std::exp(x(2));
  Vector out(3);
  // Log-transform of dM/dt = -d M + e / (1 + P^2) and dH/dt = -a P H + f / (1 + P^2) - g H.
  out << -th(0) * h + th(1) * mm / p - th(2), -th(3) + th(4) / ((1.0 + p * p) * mm),
      -th(0) * p + th(5) / ((1.0 + p * p) * h) - th(6);
  return out;
}

inline ModelDef hes1() {
  ModelDef m;
  m.name = "hes1";
  m.var_names = {"logP", "logM", "logH"};
  m.theta_names = {"a", "b", "c", "d", "e", "f", "g", "P0", "M0", "H0"};
  m.theta_true = Vector(10);
  m.theta_true << 0.022, 0.3, 0.031, 0.028, 0.5, 20.0, 0.3, 1.439, 2.037, 17.904;
  m.positive.assign(10, true);
  m.n_vars = 3;
  m.n_deriv = 3;
  m.t_min = 0.0;
  m.t_max = 240.0;
  m.sigma = 0.1;
  m.phi = 0.15;
  m.problem = [q = m.n_deriv](const Vector& theta) {
    return first_order_problem(hes1_field, theta.tail(3).array().log().matrix(), theta.head(7), q, 0.0, 240.0);
  };
  m.rhs = [](const Vector& theta) -> OdeRhs {
    const Vector th = theta.head(7);
    return [th](const Vector& x, double t) { return hes1_field(x, t, th); };
  };
  m.x0 = [](const Vector& theta) -> Vector { return theta.tail(3).array().log().matrix(); };
  m.rhs_index = {0, 1, 2};
  // P at 0, 15, ..., 240; M at 7.5, 22.5, ..., 232.5; H never.
  m.obs_times = regular_times(0.0, 7.5, 33);
  auto observed = [](int i, int k) { return (k == 0 && i % 2 == 0) || (k == 1 && i % 2 == 1); };
  m.gauss_obs = [times = m.obs_times, q = m.n_deriv, observed](const Vector&, double phi) {
    return gauss_x0_obs(times, 3, q, phi, observed);
  };
  m.draw_obs = [phi = m.phi, observed](Key key, const Vector&, const std::vector<Vector>& values) {
    return draw_gauss(key, values, phi, observed);
  };
  return m;
}

// --- SEIRAH ----------------------------------------------------------------

inline constexpr double kSeirahS0 = 63884630.0;
inline constexpr double kSeirahA0 = 618013.0;
inline constexpr double kSeirahH0 = 13388.0;
inline constexpr double kSeirahDh = 30.0;

/// theta = (b, r, alpha, D_e, D_I, D_q, E0, I0); state order (S, E, I, R, A, H).
inline Vector seirah_field(const Vector& x, double, const Vector& th) {
  const double b = th(0), r = th(1), alpha = th(2), de = th(3), di = th(4), dq = th(5);
  const double pop = kSeirahS0 + th(6) + th(7) + kSeirahA0 + kSeirahH0;
  const double s = x(0), e = x(1), i = x(2), a = x(4), h = x(5);
  const double inf = b * s * (i + alpha * a) / pop;
  Vector out(6);
  out << -inf, inf - e / de, r * e / de - i / dq - i / di, (i + a) / di + h / kSeirahDh, (1.0 - r) * e / de - a / di,
      i / dq - h / kSeirahDh;
  return out;
}

inline ModelDef seirah() {
  ModelDef m;
  m.name = "seirah";
  m.var_names = {"S", "E", "I", "R", "A", "H"};
  m.theta_names = {"b", "r", "alpha", "D_e", "D_I", "D_q", "E0", "I0"};
  m.theta_true = Vector(8);
  m.theta_true << 2.23, 0.034, 0.55, 5.1, 2.3, 1.13, 15492.0, 21752.0;
  m.positive.assign(8, true);
  m.n_vars = 6;
  m.n_deriv = 3;
  m.t_min = 0.0;
  m.t_max = 60.0;
  m.sigma = 100.0;
  m.phi = 0.0;
  auto x0 = [](const Vector& theta) -> Vector {
    Vector v(6);
    v << kSeirahS0, theta(6), theta(7), 0.0, kSeirahA0, kSeirahH0;
    return v;
  };
  m.x0 = x0;
  m.problem = [q = m.n_deriv, x0](const Vector& theta) {
    return first_order_problem(seirah_field, x0(theta), theta, q, 0.0, 60.0);
  };
  m.rhs = [](const Vector& theta) -> OdeRhs {
    return [theta](const Vector& x, double t) { return seirah_field(x, t, theta); };
  };
  m.rhs_index = {0, 1, 2, 3, 4, 5};
  m.obs_times = regular_times(0.0, 1.0, 61);
  // New ascertained cases r E / D_e recorded on the E row, new hospitalizations
  // I / D_q on the I row; the other four compartments are masked.
  m.gen_obs = [times = m.obs_times, q = m.n_deriv](const Vector& theta) {
    GenObsModel g;
    g.times = times;
    for (std::size_t i = 0; i < times.size(); ++i) {
      std::vector<Matrix> mask(6, Matrix::Zero(1, q));
      mask[1](0, 0) = 1.0;
      mask[2](0, 0) = 1.0;
      g.mask.push_back(mask);
    }
    const double ce = theta(1) / theta(3), ci = 1.0 / theta(5);
    g.loglik = [ce, ci](int, const Matrix& y, const Matrix& s) {
      return poisson_logpmf(y(1, 0), ce * s(1, 0)) + poisson_logpmf(y(2, 0), ci * s(2, 0));
    };
    g.neg_grad_hess = [ce, ci](int, const Matrix& y, const Matrix& s) {
      Vector grad = Vector::Zero(6);
      Matrix hess = Matrix::Zero(6, 6);
      const double c[2] = {ce, ci};
      for (int j = 0; j < 2; ++j) {
        const int k = j + 1;
        const double sk = s(k, 0), yk = y(k, 0);
        if (!(sk > 0.0)) throw NumericalError("Poisson rate is not positive");
        grad(k) = c[j] - yk / sk;
        hess(k, k) = yk / (sk * sk);
      }
      return std::make_pair(grad, hess);
    };
    return g;
  };
  m.draw_obs = [](Key key, const Vector& theta, const std::vector<Vector>& values) {
    const double ce = theta(1) / theta(3), ci = 1.0 / theta(5);
    ObsData out;
    for (std::size_t i = 0; i < values.size(); ++i) {
      auto eng = engine(split(key, i));
      Matrix y = Matrix::Zero(6, 1);
      std::poisson_distribution<long> pe(std::max(ce * values[i](1), 1e-12));
      std::poisson_distribution<long> pi(std::max(ci * values[i](2), 1e-12));
      y(1, 0) = static_cast<double>(pe(eng));
      y(2, 0) = static_cast<double>(pi(eng));
      out.push_back(y);
    }
    return out;
  };
  return m;
}

}  // namespace models

[[nodiscard]] inline const std::vector<ModelDef>& model_registry() {
  static const std::vector<ModelDef> reg = {models::chkrebtii(), models::fitz(), models::hes1(), models::seirah()};
  return reg;
}

[[nodiscard]] inline const ModelDef& find_model(const std::string& name) {
  std::string names;
  for (const auto& m : model_registry()) {
    if (m.name == name) return m;
    names += (names.empty() ? "" : ", ") + m.name;
  }
  throw std::invalid_argument("unknown model '" + name + "'; available: " + names);
}

// ---------------------------------------------------------------------------
// Unconstrained parameterization: Theta = (G^{-1}(theta), log sigma)

[[nodiscard]] inline std::vector<std::string> unconstrained_names(const ModelDef& m) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < m.theta_names.size(); ++i)
    out.push_back(m.positive[i] ? "log_" + m.theta_names[i] : m.theta_names[i]);
  out.push_back("log_sigma");
  return out;
}

[[nodiscard]] inline Vector to_unconstrained(const ModelDef& m, const Vector& theta, double sigma) {
  require(theta.size() == m.theta_true.size(), "model '" + m.name + "': theta has wrong dimension");
  require(sigma > 0.0, "prior sigma must be positive");
  Vector out(theta.size() + 1);
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    if (m.positive[static_cast<std::size_t>(i)]) require(theta(i) > 0.0, "model '" + m.name + "': parameter " + m.theta_names[static_cast<std::size_t>(i)] + " must be positive");
    out(i) = m.positive[static_cast<std::size_t>(i)] ? std::log(theta(i)) : theta(i);
  }
  out(theta.size()) = std::log(sigma);
  return out;
}

struct NaturalParams {
  Vector theta;
  double sigma;
};

[[nodiscard]] inline NaturalParams from_unconstrained(const ModelDef& m, const Vector& big_theta) {
  const Eigen::Index n = m.theta_true.size();
  require(big_theta.size() == n + 1, "model '" + m.name + "': unconstrained parameter has wrong dimension");
  NaturalParams out{Vector(n), std::exp(big_theta(n))};
  for (Eigen::Index i = 0; i < n; ++i)
    out.theta(i) = m.positive[static_cast<std::size_t>(i)] ? std::exp(big_theta(i)) : big_theta(i);
  return out;
}

/// Independent N(0, 10^2) on the model parameters, flat on log sigma.
/// Problem at Theta, or nullopt when Theta maps outside the finite range
/// (overflowing transforms); callers treat that as zero density.
[[nodiscard]] inline std::optional<OdeProblem> finite_problem(const ModelDef& m, const NaturalParams& np) {
  if (!np.theta.allFinite() || !std::isfinite(np.sigma) || !(np.sigma > 0.0)) return std::nullopt;
  OdeProblem p = m.problem(np.theta);
  if (!p.init.allFinite()) return std::nullopt;
  return p;
}

[[nodiscard]] inline double default_log_prior(const ModelDef& m, const Vector& big_theta) {
  double lp = 0.0;
  for (Eigen::Index i = 0; i < m.theta_true.size(); ++i) lp += -0.5 * std::pow(big_theta(i) / 10.0, 2) - std::log(10.0) - 0.5 * linalg::log2pi();
  return lp;
}

[[nodiscard]] inline BlockPrior model_prior(const ModelDef& m, int n_steps, double sigma) {
  return ibm_init((m.t_max - m.t_min) / n_steps, m.n_deriv, std::vector<double>(static_cast<std::size_t>(m.n_vars), sigma));
}

// ---------------------------------------------------------------------------
// Data simulation

struct SimData {
  std::vector<double> times;
  ObsData data;
  std::vector<Vector> truth;  // x^(0) per variable at each observation time
};

/// Fine-grid point count: the smallest multiple of the observation interval
/// count that reaches `min_steps`.
[[nodiscard]] inline int fine_steps(const ModelDef& m, int min_steps = 10000) {
  const double gap = m.obs_spacing();
  if (gap <= 0.0) return min_steps;
  const int per = static_cast<int>(std::lround((m.t_max - m.t_min) / gap));
  return ((min_steps + per - 1) / per) * per;
}

[[nodiscard]] inline SimData simulate_data(Key key, const ModelDef& m, const Vector& theta) {
  require(m.has_obs(), "model '" + m.name + "' has no measurement model");
  require(theta.size() == m.theta_true.size(), "model '" + m.name + "': theta has wrong dimension");
  const int n = fine_steps(m);
  SolverSpec spec;
  spec.n_steps = n;
  spec.interrogation = InterrogationMethod::kramer;
  const OdeProblem p = m.problem(theta);
  const SolutionPosterior post = solve_mv(p, model_prior(m, n, m.sigma), spec);
  const auto idx = obs_grid_indices(m.obs_times, m.t_min, grid_dt(p, n), n);
  SimData out;
  out.times = m.obs_times;
  for (int i : idx) out.truth.push_back(post.means[static_cast<std::size_t>(i)].col(0));
  out.data = m.draw_obs(key, theta, out.truth);
  return out;
}

// ---------------------------------------------------------------------------
// Likelihood front end

enum class Method { basic, fenrir, dalton, daltonng, magi, marginal_mcmc };

[[nodiscard]] inline std::string to_string(Method m) {
  switch (m) {
    case Method::basic: return "basic";
    case Method::fenrir: return "fenrir";
    case Method::dalton: return "dalton";
    case Method::daltonng: return "daltonng";
    case Method::magi: return "magi";
    case Method::marginal_mcmc: return "marginal-mcmc";
  }
  return "unknown";
}

[[nodiscard]] inline Method method_from_string(const std::string& s) {
  for (auto m : {Method::basic, Method::fenrir, Method::dalton, Method::daltonng, Method::magi, Method::marginal_mcmc})
    if (to_string(m) == s) return m;
  throw std::invalid_argument("method: unknown value '" + s +
                              "'; expected basic, fenrir, dalton, daltonng, magi or marginal-mcmc");
}

struct LikelihoodSetup {
  Method method = Method::basic;
  int n_steps = 100;
  InterrogationMethod interrogation = InterrogationMethod::kramer;
  KalmanType kalman_type = KalmanType::standard;
};

inline void check_compatible(const ModelDef& m, Method method) {
  require(m.has_obs(), "model '" + m.name + "' has no measurement model; only solve and benchmark apply");
  if (method == Method::fenrir || method == Method::dalton)
    require(m.gaussian(), "method " + to_string(method) + " requires a Gaussian measurement model");
}

/// log p(Y | Theta) for the plug-in methods, as a function of the unconstrained Theta.
[[nodiscard]] inline LogDensity make_loglik(const ModelDef& m, const LikelihoodSetup& setup, const ObsData& data) {
  check_compatible(m, setup.method);
  require(setup.method != Method::magi && setup.method != Method::marginal_mcmc,
          "method " + to_string(setup.method) + " has no closed-form likelihood in Theta");
  return [&m, setup, data](const Vector& big_theta) {
    const NaturalParams np = from_unconstrained(m, big_theta);
    const auto maybe = finite_problem(m, np);
    if (!maybe) return kNegInf;
    const OdeProblem& p = *maybe;
    const BlockPrior prior = model_prior(m, setup.n_steps, np.sigma);
    SolverSpec spec;
    spec.n_steps = setup.n_steps;
    spec.interrogation = setup.interrogation;
    spec.kalman_type = setup.kalman_type;
    switch (setup.method) {
      case Method::basic: return basic_loglik(p, prior, spec, m.obs_model(np.theta), data);
      case Method::fenrir: return fenrir_loglik(p, prior, spec, m.gauss_obs(np.theta, m.phi), data);
      case Method::dalton: return dalton_loglik(p, prior, spec, m.gauss_obs(np.theta, m.phi), data);
      case Method::daltonng: return dalton_ng_loglik(p, prior, spec, m.generic_obs(np.theta), data);
      default: break;
    }
    return kNegInf;
  };
}

[[nodiscard]] inline LogDensity make_logpost(const ModelDef& m, const LikelihoodSetup& setup, const ObsData& data) {
  LogDensity ll = make_loglik(m, setup, data);
  return [&m, ll](const Vector& big_theta) {
    const double lp = default_log_prior(m, big_theta);
    if (!std::isfinite(lp)) return kNegInf;
    const double l = ll(big_theta);
    return std::isfinite(l) ? lp + l : kNegInf;
  };
}

/// Marginal MCMC model over Theta with the prior scale sigma held fixed.
[[nodiscard]] inline MarginalModel make_marginal_model(const ModelDef& m, int n_steps, const ObsData& data,
                                                       KalmanType type = KalmanType::standard) {
  check_compatible(m, Method::marginal_mcmc);
  MarginalModel out;
  out.n_steps = n_steps;
  out.kalman_type = type;
  out.build = [&m, n_steps](const Vector& big_theta) {
    const NaturalParams np = from_unconstrained(m, big_theta);
    auto p = finite_problem(m, np);
    if (!p) throw NumericalError("parameter maps to non-finite values");
    return std::make_pair(*p, model_prior(m, n_steps, np.sigma));
  };
  out.log_prior = [&m](const Vector& big_theta) { return default_log_prior(m, big_theta); };
  out.loglik = [&m, n_steps, data](const Vector& big_theta, const std::vector<Matrix>& path) {
    const NaturalParams np = from_unconstrained(m, big_theta);
    const ObsModel obs = m.obs_model(np.theta);
    const auto idx = obs_grid_indices(m.obs_times, m.t_min, (m.t_max - m.t_min) / n_steps, n_steps);
    double ll = 0.0;
    for (std::size_t i = 0; i < idx.size(); ++i) ll += obs_loglik_at(obs, data, static_cast<int>(i), path[idx[i]]);
    return ll;
  };
  return out;
}

/// MAGI target over z = (Theta without log sigma, U~_{1:N} stacked), with the
/// prior scale fixed at eta and U~_0 taken from the initial value.
struct MagiTarget {
  const ModelDef* model = nullptr;
  ObsData data;
  int n_steps = 100;
  double eta = 0.1;
  double beta = 1.0;
  KalmanType kalman_type = KalmanType::square_root;
  Eigen::Index n_active = 1;

  [[nodiscard]] Eigen::Index n_theta() const { return model->theta_true.size(); }
  [[nodiscard]] Eigen::Index dim() const { return n_theta() + n_steps * model->n_vars * n_active; }

  [[nodiscard]] Vector full_theta(const Vector& z) const {
    Vector big(n_theta() + 1);
    big << z.head(n_theta()), std::log(eta);
    return big;
  }

  [[nodiscard]] std::vector<Matrix> latent(const Vector& z, const OdeProblem& p) const {
    const Eigen::Index d = model->n_vars, blk = d * n_active;
    std::vector<Matrix> u;
    u.push_back(p.init.leftCols(n_active));
    for (int n = 0; n < n_steps; ++n) u.push_back(unstack_rows(z.segment(n_theta() + n * blk, blk), d, n_active));
    return u;
  }

  [[nodiscard]] double logpost(const Vector& z) const {
    const Vector big = full_theta(z);
    const NaturalParams np = from_unconstrained(*model, big);
    const auto maybe = finite_problem(*model, np);
    if (!maybe) return kNegInf;
    const OdeProblem& p = *maybe;
    return magi_logpost(latent(z, p), p, model_prior(*model, n_steps, eta), model->obs_model(np.theta), data, beta,
                        n_active, default_log_prior(*model, big), kalman_type);
  }

  [[nodiscard]] Vector grad(const Vector& z) const {
    const Vector big = full_theta(z);
    const NaturalParams np = from_unconstrained(*model, big);
    const auto maybe = finite_problem(*model, np);
    if (!maybe) throw NumericalError("parameter maps to non-finite values");
    const OdeProblem& p = *maybe;
    const auto [val, g] = magi_logpost_grad(latent(z, p), p, model_prior(*model, n_steps, eta),
                                            model->obs_model(np.theta), data, beta, n_active, kalman_type);
    (void)val;
    Vector out(dim());
    const Eigen::Index blk = model->n_vars * n_active;
    for (int n = 0; n < n_steps; ++n) out.segment(n_theta() + n * blk, blk) = stack_rows(g[static_cast<std::size_t>(n + 1)]);
    // Theta enters through f, v and the measurement law; differentiate numerically.
    auto in_theta = [&](const Vector& th) {
      Vector zz = z;
      zz.head(n_theta()) = th;
      return logpost(zz);
    };
    out.head(n_theta()) = fd_grad(in_theta, Vector(z.head(n_theta())));
    return out;
  }

  /// Starting point: Theta0 with U~ from the solver mean at Theta0.
  [[nodiscard]] Vector init(const Vector& theta0_unconstrained) const {
    const NaturalParams np = from_unconstrained(*model, full_theta(theta0_unconstrained));
    const OdeProblem p = model->problem(np.theta);
    SolverSpec spec;
    spec.n_steps = n_steps;
    const SolutionPosterior post = solve_mv(p, model_prior(*model, n_steps, eta), spec);
    Vector z(dim());
    z.head(n_theta()) = theta0_unconstrained.head(n_theta());
    const Eigen::Index blk = model->n_vars * n_active;
    for (int n = 0; n < n_steps; ++n)
      z.segment(n_theta() + n * blk, blk) = stack_rows(post.means[static_cast<std::size_t>(n + 1)].leftCols(n_active));
    return z;
  }
};

[[nodiscard]] inline MagiTarget make_magi_target(const ModelDef& m, int n_steps, const ObsData& data, double eta = 0.1) {
  check_compatible(m, Method::magi);
  MagiTarget t;
  t.model = &m;
  t.data = data;
  t.n_steps = n_steps;
  t.eta = eta;
  const double dt = (m.t_max - m.t_min) / n_steps;
  t.beta = magi_beta(eta, dt, m.n_deriv, m.obs_spacing());
  return t;
}

}  // namespace rodeo
