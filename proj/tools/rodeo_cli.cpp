// Batch front end: solve, simulate, infer, benchmark.
//
// Exit codes: 0 success, 1 invalid configuration, 2 numerical failure.

#include "rodeo/baselines.hpp"
#include "rodeo/inference.hpp"
#include "rodeo/models.hpp"
#include "rodeo/samplers.hpp"
#include "rodeo/solver.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace rodeo;

namespace {

constexpr const char* kVersion = "0.1.0";

struct RunConfig {
  std::string model = "fitz";
  std::string method = "basic";
  std::string sampler = "laplace";
  int n_steps = 100;
  std::string interrogation = "kramer";
  std::string kalman_type = "standard";
  std::uint64_t seed = 0;
  double sigma = 0.0;  // <= 0: model default
  int n_warmup = 500;
  int n_samples = 1000;
  int n_leapfrog = 5;
  double rwm_scale = 0.02;
  std::string data;  // observation CSV; simulated when empty
  std::string out = "out";
  std::vector<int> n_steps_list;  // benchmark only
};

void from_json_checked(const json& j, RunConfig& c) {
  require(j.is_object(), "config: top level must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const json& v = it.value();
    auto bad = [&](const char* type) { return std::invalid_argument("config field '" + k + "': expected " + type); };
    auto str = [&](std::string& dst) { if (!v.is_string()) throw bad("string"); dst = v.get<std::string>(); };
    auto integer = [&](int& dst) { if (!v.is_number_integer()) throw bad("integer"); dst = v.get<int>(); };
    auto real = [&](double& dst) { if (!v.is_number()) throw bad("number"); dst = v.get<double>(); };
    if (k == "model") str(c.model);
    else if (k == "method") str(c.method);
    else if (k == "sampler") str(c.sampler);
    else if (k == "n_steps") {
      if (v.is_array()) {
        c.n_steps_list.clear();
        for (const auto& e : v) {
          if (!e.is_number_integer()) throw bad("integer or array of integers");
          c.n_steps_list.push_back(e.get<int>());
        }
      } else {
        integer(c.n_steps);
      }
    } else if (k == "interrogation") str(c.interrogation);
    else if (k == "kalman_type") str(c.kalman_type);
    else if (k == "seed") {
      if (!v.is_number_unsigned() && !v.is_number_integer()) throw bad("non-negative integer");
      c.seed = v.get<std::uint64_t>();
    } else if (k == "sigma") real(c.sigma);
    else if (k == "n_warmup") integer(c.n_warmup);
    else if (k == "n_samples") integer(c.n_samples);
    else if (k == "n_leapfrog") integer(c.n_leapfrog);
    else if (k == "rwm_scale") real(c.rwm_scale);
    else if (k == "data") str(c.data);
    else if (k == "out") str(c.out);
    else throw std::invalid_argument("config: unknown field '" + k + "'");
  }
}

json to_json(const RunConfig& c) {
  return json{{"model", c.model},       {"method", c.method},           {"sampler", c.sampler},
              {"n_steps", c.n_steps},   {"interrogation", c.interrogation}, {"kalman_type", c.kalman_type},
              {"seed", c.seed},         {"sigma", c.sigma},             {"n_warmup", c.n_warmup},
              {"n_samples", c.n_samples}, {"n_leapfrog", c.n_leapfrog}, {"rwm_scale", c.rwm_scale},
              {"data", c.data},         {"n_steps_list", c.n_steps_list}};
}

KalmanType kalman_from_string(const std::string& s) {
  if (s == "standard") return KalmanType::standard;
  if (s == "square-root" || s == "square_root") return KalmanType::square_root;
  throw std::invalid_argument("kalman_type: unknown value '" + s + "'; expected standard or square-root");
}

void validate(const RunConfig& c) {
  require(c.n_steps >= 1, "n_steps: must be at least 1");
  for (int n : c.n_steps_list) require(n >= 1, "n_steps: every entry must be at least 1");
  require(c.n_warmup >= 0, "n_warmup: must be non-negative");
  require(c.n_samples >= 1, "n_samples: must be at least 1");
  require(c.n_leapfrog >= 1, "n_leapfrog: must be at least 1");
  require(c.rwm_scale >= 0.0, "rwm_scale: must be non-negative");
  require(c.sigma >= 0.0, "sigma: must be non-negative");
  require(c.sampler == "laplace" || c.sampler == "hmc" || c.sampler == "rwm",
          "sampler: unknown value '" + c.sampler + "'; expected laplace, hmc or rwm");
  (void)find_model(c.model);
  (void)method_from_string(c.method);
  (void)interrogation_from_string(c.interrogation);
  (void)kalman_from_string(c.kalman_type);
}

std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream f(p);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  return f;
}

struct Timer {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  [[nodiscard]] double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

void write_manifest(const fs::path& dir, const RunConfig& c, const std::string& command, double wall) {
  const std::string cfg = to_json(c).dump();
  std::ostringstream hash;
  hash << std::hex << std::hash<std::string>{}(cfg);
  json m{{"command", command},       {"model", c.model},    {"method", c.method},
         {"sampler", c.sampler},     {"n_steps", c.n_steps}, {"seed", c.seed},
         {"wall_time_s", wall},      {"version", kVersion},  {"config_hash", hash.str()},
         {"config", to_json(c)}};
  open_out(dir / "manifest.json") << m.dump(2) << "\n";
}

double model_sigma(const ModelDef& m, const RunConfig& c) { return c.sigma > 0.0 ? c.sigma : m.sigma; }

// --- observation CSV: t, then one column per variable; empty cell = unobserved

void write_obs(const fs::path& p, const ModelDef& m, const SimData& sim) {
  auto f = open_out(p);
  f << "t";
  for (const auto& v : m.var_names) f << "," << v;
  f << "\n";
  const ObsModel obs = m.obs_model(m.theta_true);
  for (std::size_t i = 0; i < sim.times.size(); ++i) {
    f << fmt(sim.times[i]);
    for (int k = 0; k < m.n_vars; ++k) {
      bool observed = true;
      if (const auto* g = std::get_if<GaussObsModel>(&obs)) observed = !g->weight[i][static_cast<std::size_t>(k)].isZero(0.0);
      else observed = !std::get<GenObsModel>(obs).mask[i][static_cast<std::size_t>(k)].isZero(0.0);
      f << ",";
      if (observed) f << fmt(sim.data[i](k, 0));
    }
    f << "\n";
  }
}

ObsData read_obs(const fs::path& p, const ModelDef& m) {
  std::ifstream f(p);
  require(static_cast<bool>(f), "data: cannot read '" + p.string() + "'");
  std::string line;
  std::getline(f, line);
  ObsData out;
  std::size_t row = 0;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    require(cells.size() == static_cast<std::size_t>(m.n_vars) + 1,
            "data: row " + std::to_string(row + 1) + " has wrong column count");
    require(row < m.obs_times.size(), "data: more rows than observation times");
    require(std::abs(std::stod(cells[0]) - m.obs_times[row]) < 1e-9 * std::max(1.0, m.obs_times[row]),
            "data: row " + std::to_string(row + 1) + " time does not match the model schedule");
    Matrix y = Matrix::Zero(m.n_vars, 1);
    for (int k = 0; k < m.n_vars; ++k)
      if (!cells[static_cast<std::size_t>(k) + 1].empty()) y(k, 0) = std::stod(cells[static_cast<std::size_t>(k) + 1]);
    out.push_back(y);
    ++row;
  }
  require(row == m.obs_times.size(), "data: expected " + std::to_string(m.obs_times.size()) + " rows");
  return out;
}

// --- subcommands -------------------------------------------------------------

void run_solve(const RunConfig& c, const fs::path& dir) {
  const ModelDef& m = find_model(c.model);
  SolverSpec spec;
  spec.n_steps = c.n_steps;
  spec.interrogation = interrogation_from_string(c.interrogation);
  spec.kalman_type = kalman_from_string(c.kalman_type);
  spec.key = Key{c.seed};
  const SolutionPosterior post = solve_mv(m.problem(m.theta_true), model_prior(m, c.n_steps, model_sigma(m, c)), spec);
  auto f = open_out(dir / "solve.csv");
  f << "t,var,deriv,mean,sd\n";
  for (std::size_t n = 0; n < post.times.size(); ++n)
    for (int k = 0; k < m.n_vars; ++k)
      for (int j = 0; j < m.n_deriv; ++j)
        f << fmt(post.times[n]) << "," << m.var_names[static_cast<std::size_t>(k)] << "," << j << ","
          << fmt(post.means[n](k, j)) << "," << fmt(std::sqrt(std::max(0.0, post.covs[n][static_cast<std::size_t>(k)](j, j))))
          << "\n";
}

void run_simulate(const RunConfig& c, const fs::path& dir) {
  const ModelDef& m = find_model(c.model);
  require(m.has_obs(), "model: '" + m.name + "' has no measurement model");
  const SimData sim = simulate_data(Key{c.seed}, m, m.theta_true);
  write_obs(dir / "obs.csv", m, sim);
}

void write_draws(const fs::path& p, const std::vector<std::string>& names, const Matrix& draws) {
  auto f = open_out(p);
  for (std::size_t j = 0; j < names.size(); ++j) f << (j ? "," : "") << names[j];
  f << "\n";
  for (Eigen::Index i = 0; i < draws.rows(); ++i) {
    for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(names.size()); ++j) f << (j ? "," : "") << fmt(draws(i, j));
    f << "\n";
  }
}

void write_chain_summary(const fs::path& p, const ChainResult& r) {
  json s{{"acceptance_rate", r.acceptance_rate}, {"step_size", r.step_size}, {"n_divergent", r.n_divergent},
         {"warning", r.warning}};
  open_out(p) << s.dump(2) << "\n";
}

void run_infer(const RunConfig& c, const fs::path& dir) {
  const ModelDef& m = find_model(c.model);
  const Method method = method_from_string(c.method);
  check_compatible(m, method);
  const ObsData data = c.data.empty() ? simulate_data(split(Key{c.seed}, 0), m, m.theta_true).data : read_obs(c.data, m);
  const Key key = split(Key{c.seed}, 1);
  const Vector theta0 = to_unconstrained(m, m.theta_true, model_sigma(m, c));
  std::vector<std::string> names = unconstrained_names(m);
  const Eigen::Index n_model = m.theta_true.size();

  if (method == Method::magi) {
    require(c.sampler == "hmc", "sampler: method magi requires sampler hmc");
    MagiTarget target = make_magi_target(m, c.n_steps, data);
    target.kalman_type = kalman_from_string(c.kalman_type);
    HmcOptions opts;
    opts.n_warmup = c.n_warmup;
    opts.n_samples = c.n_samples;
    opts.n_leapfrog = c.n_leapfrog;
    const ChainResult r = hmc_chain(key, [&](const Vector& z) { return target.logpost(z); },
                                    [&](const Vector& z) { return target.grad(z); }, target.init(theta0), opts);
    names.pop_back();
    write_draws(dir / "draws.csv", names, r.draws);
    write_chain_summary(dir / "chain.json", r);
    return;
  }

  // Proposal scale: rwm_scale for the model parameters, log sigma held fixed.
  Vector sigma_rw = Vector::Constant(theta0.size(), c.rwm_scale);
  sigma_rw(n_model) = 0.0;

  if (method == Method::marginal_mcmc) {
    require(c.sampler == "rwm", "sampler: method marginal-mcmc requires sampler rwm");
    const MarginalModel mm = make_marginal_model(m, c.n_steps, data, kalman_from_string(c.kalman_type));
    const ChainResult r = rwm_marginal_chain(key, mm, theta0, sigma_rw, c.n_samples);
    write_draws(dir / "draws.csv", names, r.draws);
    write_chain_summary(dir / "chain.json", r);
    return;
  }

  LikelihoodSetup setup;
  setup.method = method;
  setup.n_steps = c.n_steps;
  setup.interrogation = interrogation_from_string(c.interrogation);
  setup.kalman_type = kalman_from_string(c.kalman_type);
  const LogDensity logpost = make_logpost(m, setup, data);

  if (c.sampler == "laplace") {
    LaplaceOptions opts;
    for (Eigen::Index i = 0; i < n_model; ++i) opts.subset.push_back(static_cast<int>(i));
    const LaplaceResult r = laplace_fit(logpost, theta0, opts);
    auto f = open_out(dir / "laplace.csv");
    f << "param,mode,sd\n";
    for (std::size_t i = 0; i < names.size(); ++i) {
      f << names[i] << "," << fmt(r.mode(static_cast<Eigen::Index>(i))) << ",";
      for (std::size_t j = 0; j < r.index.size(); ++j)
        if (r.index[j] == static_cast<int>(i)) f << fmt(std::sqrt(r.cov(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(j))));
      f << "\n";
    }
    auto g = open_out(dir / "cov.csv");
    for (std::size_t j = 0; j < r.index.size(); ++j) g << (j ? "," : "") << names[static_cast<std::size_t>(r.index[j])];
    g << "\n";
    for (Eigen::Index a = 0; a < r.cov.rows(); ++a) {
      for (Eigen::Index b = 0; b < r.cov.cols(); ++b) g << (b ? "," : "") << fmt(r.cov(a, b));
      g << "\n";
    }
    json s{{"converged", r.converged}, {"n_iter", r.n_iter}, {"logpost", r.logpost}};
    open_out(dir / "laplace.json") << s.dump(2) << "\n";
    return;
  }
  ChainResult r;
  if (c.sampler == "hmc") {
    HmcOptions opts;
    opts.n_warmup = c.n_warmup;
    opts.n_samples = c.n_samples;
    opts.n_leapfrog = c.n_leapfrog;
    r = hmc_chain(key, logpost, {}, theta0, opts);
  } else {
    r = rwm_chain(key, logpost, theta0, sigma_rw, c.n_samples);
  }
  write_draws(dir / "draws.csv", names, r.draws);
  write_chain_summary(dir / "chain.json", r);
}

void run_benchmark(const RunConfig& c, const fs::path& dir) {
  const ModelDef& m = find_model(c.model);
  std::vector<int> ns = c.n_steps_list.empty() ? std::vector<int>{c.n_steps} : c.n_steps_list;
  const OdeProblem p = m.problem(m.theta_true);
  const OdeRhs rhs = m.rhs(m.theta_true);
  const Vector x0 = m.x0(m.theta_true);
  auto f = open_out(dir / "benchmark.csv");
  f << "n_steps,solver_err,euler_err,rk4_err,solver_s,euler_s,rk4_s\n";
  for (int n : ns) {
    // Reference on a refinement of the same grid: exact for chkrebtii, RK4 otherwise.
    const int stride = std::max(1, 100000 / n);
    DetSolution truth;
    if (m.name == "chkrebtii") {
      truth.grid.resize(static_cast<std::size_t>(n) * stride + 1);
      truth.values.resize(truth.grid.size());
      for (std::size_t i = 0; i < truth.grid.size(); ++i) {
        truth.grid[i] = m.t_min + (m.t_max - m.t_min) * static_cast<double>(i) / (static_cast<double>(n) * stride);
        truth.values[i] = Vector::Constant(1, closed_form_chkrebtii(truth.grid[i]));
      }
    } else {
      truth = rk4_solve(rhs, x0, m.t_min, m.t_max, n * stride);
    }
    SolverSpec spec;
    spec.n_steps = n;
    spec.interrogation = interrogation_from_string(c.interrogation);
    spec.kalman_type = kalman_from_string(c.kalman_type);
    spec.key = Key{c.seed};
    Timer ts;
    const SolutionPosterior post = solve_mv(p, model_prior(m, n, model_sigma(m, c)), spec);
    const double t_solver = ts.seconds();
    Timer te;
    const DetSolution eu = euler_solve(rhs, x0, m.t_min, m.t_max, n);
    const double t_euler = te.seconds();
    Timer tr;
    const DetSolution rk = rk4_solve(rhs, x0, m.t_min, m.t_max, n);
    const double t_rk4 = tr.seconds();
    auto det_err = [&](const DetSolution& s) {
      double err = 0.0;
      for (std::size_t i = 0; i < s.values.size(); ++i)
        for (int k = 0; k < m.n_vars; ++k) {
          const int j = m.rhs_index[static_cast<std::size_t>(k)];
          const Eigen::Index tj = m.name == "chkrebtii" ? 0 : j;
          err = std::max(err, std::abs(s.values[i](j) - truth.values[i * static_cast<std::size_t>(stride)](tj)));
        }
      return err;
    };
    double solver_err = 0.0;
    for (std::size_t i = 0; i < post.means.size(); ++i)
      for (int k = 0; k < m.n_vars; ++k) {
        const Eigen::Index tj = m.name == "chkrebtii" ? 0 : m.rhs_index[static_cast<std::size_t>(k)];
        solver_err = std::max(solver_err, std::abs(post.means[i](k, 0) - truth.values[i * static_cast<std::size_t>(stride)](tj)));
      }
    f << n << "," << fmt(solver_err) << "," << fmt(det_err(eu)) << "," << fmt(det_err(rk)) << "," << fmt(t_solver) << ","
      << fmt(t_euler) << "," << fmt(t_rk4) << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Probabilistic ODE solver and parameter inference"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  RunConfig cfg;
  std::string config_path, n_steps_arg;
  std::uint64_t seed_arg = 0;
  double sigma_arg = 0.0;

  struct Flags {
    std::string model, method, sampler, interrogation, kalman_type, data, out;
    int n_warmup = 0, n_samples = 0, n_leapfrog = 0;
    double rwm_scale = 0.0;
  } fl;

  std::vector<CLI::App*> subs;
  for (const char* name : {"solve", "simulate", "infer", "benchmark"}) {
    CLI::App* s = app.add_subcommand(name);
    s->add_option("--config", config_path, "JSON file with RunConfig fields");
    s->add_option("--model", fl.model, "Model name");
    s->add_option("--n-steps", n_steps_arg, "Solver steps (benchmark: comma-separated list)");
    s->add_option("--seed", seed_arg, "Random seed");
    s->add_option("--interrogation", fl.interrogation, "schober | chkrebtii | tronarp | kramer");
    s->add_option("--kalman-type", fl.kalman_type, "standard | square-root");
    s->add_option("--sigma", sigma_arg, "IBM prior scale (default: model value)");
    s->add_option("--out", fl.out, "Output directory");
    if (std::string(name) == "infer") {
      s->add_option("--method", fl.method, "basic | fenrir | dalton | daltonng | magi | marginal-mcmc");
      s->add_option("--sampler", fl.sampler, "laplace | hmc | rwm");
      s->add_option("--data", fl.data, "Observation CSV (simulated when omitted)");
      s->add_option("--n-warmup", fl.n_warmup, "HMC warmup iterations");
      s->add_option("--n-samples", fl.n_samples, "Chain length");
      s->add_option("--n-leapfrog", fl.n_leapfrog, "HMC leapfrog steps");
      s->add_option("--rwm-scale", fl.rwm_scale, "Random-walk proposal sd");
    }
    subs.push_back(s);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  CLI::App* sub = nullptr;
  for (auto* s : subs)
    if (s->parsed()) sub = s;
  const std::string command = sub->get_name();

  try {
    if (!config_path.empty()) {
      std::ifstream f(config_path);
      require(static_cast<bool>(f), "config: cannot read '" + config_path + "'");
      json j;
      try {
        j = json::parse(f);
      } catch (const json::parse_error& e) {
        throw std::invalid_argument(std::string("config: invalid JSON: ") + e.what());
      }
      from_json_checked(j, cfg);
    }
    if (const char* env = std::getenv("RODEO_SEED")) {
      try {
        cfg.seed = std::stoull(env);
      } catch (const std::exception&) {
        throw std::invalid_argument("RODEO_SEED: expected a non-negative integer");
      }
    }
    auto given = [&](const char* opt) { return sub->count(opt) > 0; };
    if (given("--model")) cfg.model = fl.model;
    if (given("--seed")) cfg.seed = seed_arg;
    if (given("--interrogation")) cfg.interrogation = fl.interrogation;
    if (given("--kalman-type")) cfg.kalman_type = fl.kalman_type;
    if (given("--sigma")) cfg.sigma = sigma_arg;
    if (given("--out")) cfg.out = fl.out;
    if (given("--n-steps")) {
      cfg.n_steps_list.clear();
      std::stringstream ss(n_steps_arg);
      std::string tok;
      while (std::getline(ss, tok, ',')) {
        try {
          std::size_t pos = 0;
          const int v = std::stoi(tok, &pos);
          if (pos != tok.size()) throw std::invalid_argument("");
          cfg.n_steps_list.push_back(v);
        } catch (const std::exception&) {
          throw std::invalid_argument("n_steps: '" + tok + "' is not an integer");
        }
      }
      require(!cfg.n_steps_list.empty(), "n_steps: empty list");
      require(command == "benchmark" || cfg.n_steps_list.size() == 1, "n_steps: a list is only valid for benchmark");
      cfg.n_steps = cfg.n_steps_list.front();
      if (command != "benchmark") cfg.n_steps_list.clear();
    }
    if (command == "infer") {
      if (given("--method")) cfg.method = fl.method;
      if (given("--sampler")) cfg.sampler = fl.sampler;
      if (given("--data")) cfg.data = fl.data;
      if (given("--n-warmup")) cfg.n_warmup = fl.n_warmup;
      if (given("--n-samples")) cfg.n_samples = fl.n_samples;
      if (given("--n-leapfrog")) cfg.n_leapfrog = fl.n_leapfrog;
      if (given("--rwm-scale")) cfg.rwm_scale = fl.rwm_scale;
    }
    validate(cfg);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }

  const fs::path dir(cfg.out);
  try {
    fs::create_directories(dir);
    Timer t;
    if (command == "solve") run_solve(cfg, dir);
    else if (command == "simulate") run_simulate(cfg, dir);
    else if (command == "infer") run_infer(cfg, dir);
    else run_benchmark(cfg, dir);
    write_manifest(dir, cfg, command, t.seconds());
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure (model " << cfg.model << ", method " << cfg.method;
    if (e.step()) std::cerr << ", step " << *e.step();
    std::cerr << "): " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
