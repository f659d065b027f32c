#pragma once

#include "newtonflow/builtin_fields.hpp"
#include "newtonflow/cli/config.hpp"
#include "newtonflow/equivalence.hpp"
#include "newtonflow/glm.hpp"
#include "newtonflow/particles.hpp"
#include "newtonflow/transport.hpp"

#include <openssl/evp.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace newtonflow::cli {

struct Artifact {
  std::string name;
  std::string content;
};

inline std::string sha256_hex(const std::string& data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1) throw IoError("SHA-256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

/// Manifest: tool version, resolved configuration, then one line per
/// artifact with its SHA-256 and size.
inline std::string manifest_text(const RunConfig& cfg, const std::vector<Artifact>& artifacts) {
  std::string m = std::string("tool=newtonflow ") + kVersion + "\n" + resolved_text(cfg);
  for (const auto& a : artifacts)
    m += "artifact=" + a.name + " sha256=" + sha256_hex(a.content) + " bytes=" + std::to_string(a.content.size()) + "\n";
  return m;
}

namespace detail {

inline ConfigError missing(const std::string& key, const std::string& command) {
  return ConfigError(key, 0, "missing required key '" + key + "' for command '" + command + "'");
}

inline std::vector<double> broadcast(const std::vector<double>& v, std::size_t p, const std::string& key) {
  if (v.size() == p) return v;
  if (v.size() == 1) return std::vector<double>(p, v[0]);
  throw ConfigError(key, 0, "key '" + key + "' must have 1 or " + std::to_string(p) + " entries");
}

inline bool needs_grid(const std::string& c) { return c != "glm-demo"; }
inline bool needs_field(const std::string& c) { return c != "glm-demo"; }
inline bool needs_time(const std::string& c) { return c != "glm-demo"; }
inline bool needs_init(const std::string& c) {
  return c == "solve-pde" || c == "simulate-particles" || c == "compare" || c == "momenta";
}
inline bool needs_particles(const std::string& c) { return c == "simulate-particles" || c == "compare"; }

}  // namespace detail

/// Everything a command needs, resolved and checked before any computation.
struct ResolvedRun {
  RunConfig config;
  int p = 0;
  std::optional<GridSpec> grid;
  std::optional<glm::Dataset> dataset;
  std::optional<VelocityField> field;
  Scheme scheme = Scheme::donor_cell;
  Method method = Method::rk4;
  Vector init_mean;
  Matrix init_cov;
};

inline ResolvedRun resolve(const RunConfig& cfg) {
  const std::string& cmd = cfg.command;
  if (!known_commands().count(cmd)) throw ConfigError("command", 0, "unknown command '" + cmd + "'");
  ResolvedRun r;
  r.config = cfg;

  if (detail::needs_grid(cmd)) {
    if (!cfg.grid || cfg.grid->lower.empty()) throw detail::missing("grid_lower", cmd);
    if (cfg.grid->dx.empty()) throw detail::missing("grid_dx", cmd);
    if (cfg.grid->cells.empty()) throw detail::missing("grid_cells", cmd);
  }
  if (detail::needs_field(cmd) && cfg.field_key.empty()) throw detail::missing("field", cmd);
  if (!cfg.field_key.empty()) {
    const auto& keys = builtin_field_keys();
    if (std::find(keys.begin(), keys.end(), cfg.field_key) == keys.end())
      throw ConfigError("field", 0, "unknown field '" + cfg.field_key + "'");
  }
  const bool glm_needed = cmd == "glm-demo" || field_needs_dataset(cfg.field_key);
  if (glm_needed && (!cfg.glm || cfg.glm->beta_star.empty())) throw detail::missing("beta_star", cmd);
  if (detail::needs_time(cmd) && !cfg.dt) throw detail::missing("dt", cmd);
  if (detail::needs_time(cmd) && cmd != "lemma-tests" && !cfg.t_end) throw detail::missing("t_end", cmd);
  if (detail::needs_init(cmd)) {
    if (cfg.init_mean.empty()) throw detail::missing("init_mean", cmd);
    if (cfg.init_sd.empty()) throw detail::missing("init_sd", cmd);
  }
  if (detail::needs_particles(cmd) && !cfg.particles) throw detail::missing("particles", cmd);
  if (cmd == "lemma-tests") {
    if (cfg.center.empty()) throw detail::missing("center", cmd);
    if (!cfg.sigma) throw detail::missing("sigma", cmd);
  }

  // Dimension comes from the grid, else from beta_star.
  if (cfg.grid && !cfg.grid->lower.empty())
    r.p = static_cast<int>(cfg.grid->lower.size());
  else if (cfg.glm)
    r.p = static_cast<int>(cfg.glm->beta_star.size());
  if (glm_needed && static_cast<int>(cfg.glm->beta_star.size()) != r.p)
    throw ConfigError("beta_star", 0, "beta_star has " + std::to_string(cfg.glm->beta_star.size()) +
                                          " entries but the grid has dimension " + std::to_string(r.p));

  try {
    r.scheme = parse_scheme(cfg.scheme);
  } catch (const InvalidArgument& e) {
    throw ConfigError("scheme", 0, e.what());
  }
  try {
    r.method = parse_method(cfg.method);
  } catch (const InvalidArgument& e) {
    throw ConfigError("method", 0, e.what());
  }
  if (!(cfg.cfl > 0 && cfg.cfl <= 1)) throw ConfigError("cfl", 0, "cfl must lie in (0, 1]");
  if (cfg.dt && !(*cfg.dt > 0)) throw ConfigError("dt", 0, "dt must be positive");
  if (cfg.t_end && !(*cfg.t_end >= 0)) throw ConfigError("t_end", 0, "t_end must be nonnegative");
  for (double t : cfg.snapshots)
    if (!(t >= 0) || (cfg.t_end && t > *cfg.t_end + 1e-12))
      throw ConfigError("snapshots", 0, "snapshot time " + fmt17(t) + " outside [0, t_end]");
  if (cfg.particles && *cfg.particles < 1) throw ConfigError("particles", 0, "particles must be positive");
  if (cmd == "glm-demo" && cfg.replications < 1) throw ConfigError("replications", 0, "replications must be positive");

  if (cfg.grid && !cfg.grid->lower.empty()) {
    const auto p = static_cast<std::size_t>(r.p);
    const auto dx = detail::broadcast(cfg.grid->dx, p, "grid_dx");
    std::vector<double> cells_d(cfg.grid->cells.begin(), cfg.grid->cells.end());
    const auto cells_b = detail::broadcast(cells_d, p, "grid_cells");
    std::vector<std::size_t> cells;
    for (double c : cells_b) {
      if (c < 3) throw ConfigError("grid_cells", 0, "grid_cells must be at least 3");
      cells.push_back(static_cast<std::size_t>(c));
    }
    try {
      r.grid = GridSpec(cfg.grid->lower, dx, cells);
    } catch (const InvalidArgument& e) {
      throw ConfigError("grid_lower", 0, e.what());
    }
  }
  if (glm_needed) {
    glm::CovariateLaw law;
    try {
      law = glm::parse_covariate_law(cfg.glm->law);
    } catch (const InvalidArgument& e) {
      throw ConfigError("covariate_law", 0, e.what());
    }
    if (cfg.glm->n < r.p) throw ConfigError("glm_n", 0, "glm_n must be at least the dimension");
    const Vector beta = Eigen::Map<const Vector>(cfg.glm->beta_star.data(), r.p);
    r.dataset = glm::simulate(cfg.glm->n, beta, cfg.glm_seed(), law);
  }
  if (!cfg.field_key.empty()) {
    if (cfg.field_key == "rotation" && r.p < 2) throw ConfigError("field", 0, "rotation needs dimension >= 2");
    r.field = make_builtin_field(cfg.field_key, r.p, r.dataset ? &*r.dataset : nullptr);
  }
  if (detail::needs_init(cmd)) {
    if (static_cast<int>(cfg.init_mean.size()) != r.p)
      throw ConfigError("init_mean", 0, "init_mean must have " + std::to_string(r.p) + " entries");
    const auto sd = detail::broadcast(cfg.init_sd, r.p, "init_sd");
    r.init_mean = Eigen::Map<const Vector>(cfg.init_mean.data(), r.p);
    r.init_cov = Matrix::Zero(r.p, r.p);
    for (int k = 0; k < r.p; ++k) {
      if (!(sd[k] > 0)) throw ConfigError("init_sd", 0, "init_sd must be positive");
      r.init_cov(k, k) = sd[k] * sd[k];
    }
  }
  if (cmd == "lemma-tests") {
    if (static_cast<int>(cfg.center.size()) != r.p)
      throw ConfigError("center", 0, "center must have " + std::to_string(r.p) + " entries");
    if (!(*cfg.sigma > 0)) throw ConfigError("sigma", 0, "sigma must be positive");
    if (cfg.halvings < 1) throw ConfigError("halvings", 0, "halvings must be at least 1");
  }
  return r;
}

namespace detail {

inline std::string time_tag(std::size_t j, double t) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%02zu_t%g", j, t);
  return buf;
}

inline std::vector<Artifact> density_artifacts(const std::string& stem, std::size_t j, const DensityField& rho,
                                               const Vector& mean) {
  std::vector<Artifact> out;
  const std::string tag = time_tag(j, rho.time);
  out.push_back({stem + "_" + tag + ".txt", density_to_text(rho)});
  const int p = rho.grid.dim();
  const auto cut = nearest_cell(rho.grid, mean);
  for (int a = 0; a < p; ++a)
    for (int b = a + 1; b < p; ++b)
      out.push_back({"section_" + stem + "_" + tag + "_x" + std::to_string(a + 1) + "x" + std::to_string(b + 1) + ".csv",
                     section_csv(rho, a, b, cut)});
  return out;
}

inline std::string summary_line(const std::string& k, const std::string& v) { return k + "=" + v + "\n"; }

inline std::optional<glm::MleResult> glm_mle(const ResolvedRun& r) {
  if (!r.dataset) return std::nullopt;
  return glm::fisher_scoring_solve(*r.dataset, Vector::Zero(r.p), 1e-10, 100);
}

}  // namespace detail

inline std::vector<Artifact> run_solve_pde(const ResolvedRun& r, unsigned threads, bool momenta_only = false) {
  const RunConfig& c = r.config;
  const TransportOptions opt{r.scheme, c.cfl, threads};
  const DensityField rho0 = gaussian_density(*r.grid, r.init_mean, r.init_cov);
  const TransportOperator op(*r.field, *r.grid, r.scheme, threads);
  const double stable = op.max_stable_dt(1.0);
  const TransportSolution sol = solve_transport(rho0, *r.field, *c.dt, *c.t_end, c.snapshots, opt);

  std::vector<Artifact> out;
  std::string summary;
  summary += detail::summary_line("scheme", to_string(r.scheme));
  summary += detail::summary_line("stable_dt_cfl1", fmt17(stable));
  summary += detail::summary_line("dt", fmt17(*c.dt));
  summary += detail::summary_line("dt_satisfies_cfl", *c.dt <= stable ? "true" : "false");
  summary += detail::summary_line("substeps", std::to_string(sol.substeps));
  summary += detail::summary_line("steps", std::to_string(sol.steps));
  for (std::size_t j = 0; j < sol.snapped.size(); ++j)
    if (sol.snapped[j])
      summary += detail::summary_line("snapped_snapshot", fmt17(sol.requested_times[j]) + "->" +
                                                              fmt17(sol.snapshots[j].time));
  if (const auto mle = detail::glm_mle(r)) {
    summary += detail::summary_line("beta_hat", join17(mle->beta_hat));
    summary += detail::summary_line("mass_fraction_within_0.2_of_beta_hat",
                                    fmt17(mass_fraction_within(sol.snapshots.back(), mle->beta_hat, 0.2)));
  }

  if (momenta_only) {
    std::string csv = "t,momenta,mass,outflow\n";
    bool non_increasing = true;
    const double slack = 1e-3 * sol.reports.front().momenta;
    for (std::size_t j = 0; j < sol.reports.size(); ++j) {
      const auto& m = sol.reports[j];
      csv += fmt17(m.time) + "," + fmt17(m.momenta) + "," + fmt17(m.mass) + "," + fmt17(sol.outflow[j]) + "\n";
      if (j > 0 && m.momenta > sol.reports[j - 1].momenta + slack) non_increasing = false;
    }
    summary += detail::summary_line("momenta_non_increasing", non_increasing ? "true" : "false");
    out.push_back({"momenta.csv", csv});
  } else {
    std::string csv = moments_csv_header(r.p);
    for (std::size_t j = 0; j < sol.snapshots.size(); ++j) {
      csv += moments_csv_row(sol.reports[j], sol.outflow[j]);
      for (auto& a : detail::density_artifacts("pde", j, sol.snapshots[j], sol.reports[j].mean)) out.push_back(a);
    }
    out.push_back({"moments.csv", csv});
  }
  out.push_back({"summary.txt", summary});
  return out;
}

inline std::vector<Artifact> run_simulate_particles(const ResolvedRun& r, unsigned threads) {
  const RunConfig& c = r.config;
  const WorkingDomain domain = r.grid->domain();
  ParticleEnsemble e = sample_initial(domain, GaussianLaw{r.init_mean, r.init_cov}, *c.particles, c.particles_seed());
  std::vector<double> times = c.snapshots.empty() ? std::vector<double>{*c.t_end} : c.snapshots;
  std::vector<Artifact> out;
  std::string summary = "particles=" + std::to_string(*c.particles) + "\nmethod=" + to_string(r.method) + "\n";
  std::size_t escaped = 0;
  for (std::size_t j = 0; j < times.size(); ++j) {
    if (times[j] > e.time) {
      auto adv = advance_ensemble(e, *r.field, *c.dt, times[j] - e.time, r.method, domain, threads);
      escaped += adv.escaped;
      const double t = times[j];
      e = std::move(adv.ensemble);
      e.time = t;
    }
    out.push_back({"particles_" + detail::time_tag(j, e.time) + ".csv", ensemble_csv(e)});
    if (!e.positions.empty())
      for (auto& a : detail::density_artifacts("particles", j, empirical_density(e, *r.grid), e.mean())) out.push_back(a);
    summary += "escaped_at_" + fmt17(e.time) + "=" + std::to_string(escaped) + "\n";
  }
  out.push_back({"summary.txt", summary});
  return out;
}

inline std::vector<Artifact> run_compare(const ResolvedRun& r, unsigned threads) {
  const RunConfig& c = r.config;
  EquivalenceConfig ec;
  ec.init = GaussianLaw{r.init_mean, r.init_cov};
  ec.particles = static_cast<std::size_t>(*c.particles);
  ec.grid = *r.grid;
  ec.dt = *c.dt;
  ec.t_end = *c.t_end;
  ec.snapshot_times = c.snapshots;
  ec.seed = c.particles_seed();
  ec.method = r.method;
  ec.transport = TransportOptions{r.scheme, c.cfl, threads};
  const auto snaps = equivalence_experiment(*r.field, ec);
  std::string csv = "t,l1_distance,max_abs,mass_pde,mass_particles,escaped_fraction,outflow_fraction\n";
  for (const auto& s : snaps)
    csv += fmt17(s.comparison.time) + "," + fmt17(s.comparison.l1_distance) + "," + fmt17(s.comparison.max_abs) + "," +
           fmt17(s.comparison.mass_1) + "," + fmt17(s.comparison.mass_2) + "," + fmt17(s.escaped_fraction) + "," +
           fmt17(s.outflow_fraction) + "\n";
  return {{"comparison.csv", csv}};
}

inline std::vector<Artifact> run_glm_demo(const ResolvedRun& r, unsigned threads) {
  const RunConfig& c = r.config;
  const glm::Dataset& d = *r.dataset;
  std::vector<Artifact> out{{"dataset.csv", glm::to_csv(d)}, {"dataset.meta", glm::sidecar(d)}};
  const auto mle = glm::fisher_scoring_solve(d, Vector::Zero(r.p), 1e-10, 100);
  out.push_back({"mle.txt", "beta_hat=" + join17(mle.beta_hat) + "\niterations=" + std::to_string(mle.iterations) +
                                "\nfinal_score_norm=" + fmt17(mle.final_score_norm) +
                                "\nloglik=" + fmt17(glm::loglik(d, mle.beta_hat)) + "\n"});

  const auto rep = glm::bartlett_check(d.beta_star(), d.n(), static_cast<int>(c.replications), derive_seed(c.seed, 2),
                                       d.law(), threads);
  std::string b = "quantity,i,j,estimate,std_error\n";
  for (int i = 0; i < r.p; ++i) b += "mean_score," + std::to_string(i + 1) + ",0," + fmt17(rep.mean_score[i]) + "," + fmt17(rep.score_std_error[i]) + "\n";
  for (int i = 0; i < r.p; ++i)
    for (int j = 0; j < r.p; ++j) {
      const std::string ij = std::to_string(i + 1) + "," + std::to_string(j + 1) + ",";
      b += "mean_neg_hessian," + ij + fmt17(rep.mean_neg_hessian(i, j)) + ",\n";
      b += "fisher," + ij + fmt17(rep.fisher(i, j)) + ",\n";
      b += "mean_score_outer," + ij + fmt17(rep.mean_score_outer(i, j)) + ",\n";
      b += "identity_gap," + ij + fmt17(rep.identity_gap()(i, j)) + "," + fmt17(rep.identity_std_error(i, j)) + "\n";
    }
  out.push_back({"bartlett.csv", b});

  const double dt = c.dt.value_or(0.05);
  const double t_end = c.t_end.value_or(10.0);
  const auto tr = integrate(glm::fisher_field(d), Vector::Zero(r.p), dt, t_end, r.method);
  std::string csv = "t";
  for (int k = 0; k < r.p; ++k) csv += ",beta" + std::to_string(k + 1);
  csv += "\n";
  for (std::size_t i = 0; i < tr.times.size(); ++i) csv += fmt17(tr.times[i]) + "," + join17(tr.states[i]) + "\n";
  out.push_back({"trajectory.csv", csv});
  return out;
}

inline std::vector<Artifact> run_lemma_tests(const ResolvedRun& r) {
  const RunConfig& c = r.config;
  const Vector center = Eigen::Map<const Vector>(c.center.data(), r.p);
  const int h = static_cast<int>(c.halvings);
  const auto drift = drift_test(*r.field, center, *c.sigma, *c.dt, *r.grid, r.scheme, h);
  std::string dcsv = "sigma,dt,residual,ratio\n";
  for (std::size_t i = 0; i < drift.levels.size(); ++i)
    dcsv += fmt17(drift.levels[i].sigma) + "," + fmt17(drift.levels[i].dt) + "," + fmt17(drift.levels[i].residual) + "," +
            (i ? fmt17(drift.ratios[i - 1]) : "") + "\n";
  const auto var = variance_test(*r.field, center, *c.sigma, *c.dt, *r.grid, r.scheme, h);
  std::string vcsv = "sigma,dt,delta_cov_norm,normalized,nonlinear_part,nonlinear_ratio\n";
  for (std::size_t i = 0; i < var.levels.size(); ++i) {
    const auto& l = var.levels[i];
    vcsv += fmt17(l.sigma) + "," + fmt17(l.dt) + "," + fmt17(l.delta_cov_norm) + "," + fmt17(l.normalized) + "," +
            fmt17(l.nonlinear_part) + "," + (i ? fmt17(var.nonlinear_ratios[i - 1]) : "") + "\n";
  }
  const std::vector<ScalarMap> fs{[](const Vector& x) { return x[0]; }, [](const Vector& x) { return x[0] * x[0]; }};
  const auto sur = delta_surrogate_test(*r.field, center, *c.sigma, *c.dt, fs, *r.grid);
  std::string scsv = "function,sigma,surrogate,exact,error,ratio\n";
  const char* names[] = {"x1", "x1^2"};
  for (std::size_t f = 0; f < sur.levels.size(); ++f)
    for (std::size_t i = 0; i < sur.levels[f].size(); ++i) {
      const auto& l = sur.levels[f][i];
      scsv += std::string(names[f]) + "," + fmt17(l.sigma) + "," + fmt17(l.surrogate) + "," + fmt17(l.exact) + "," +
              fmt17(l.error) + "," + (i ? fmt17(sur.ratios[f]) : "") + "\n";
    }
  return {{"drift.csv", dcsv}, {"variance.csv", vcsv}, {"surrogate.csv", scsv}};
}

/// Runs a resolved configuration and returns its artifacts (without the
/// manifest).
inline std::vector<Artifact> execute(const ResolvedRun& r, unsigned threads = 1) {
  const std::string& cmd = r.config.command;
  if (cmd == "solve-pde") return run_solve_pde(r, threads);
  if (cmd == "momenta") return run_solve_pde(r, threads, true);
  if (cmd == "simulate-particles") return run_simulate_particles(r, threads);
  if (cmd == "compare") return run_compare(r, threads);
  if (cmd == "glm-demo") return run_glm_demo(r, threads);
  return run_lemma_tests(r);
}

/// Writes artifacts followed by manifest.txt into `dir`.
inline void write_artifacts(const std::filesystem::path& dir, const RunConfig& cfg, const std::vector<Artifact>& arts) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir.string() + "': " + ec.message());
  auto write = [&](const std::string& name, const std::string& content) {
    std::ofstream f(dir / name, std::ios::binary | std::ios::trunc);
    f << content;
    if (!f) throw IoError("cannot write '" + (dir / name).string() + "'");
  };
  for (const auto& a : arts) write(a.name, a.content);
  write("manifest.txt", manifest_text(cfg, arts));
}

struct Overrides {
  std::optional<std::string> output_dir;
  std::optional<std::uint64_t> seed;
  unsigned threads = 0;
};

struct RunStatus {
  int exit_code = 0;
  /// Empty on success; otherwise a single machine-parsable line.
  std::string error;
};

inline std::string error_line(const std::string& kind, const std::string& message, const std::string& key = "") {
  std::string m = message;
  for (char& ch : m)
    if (ch == '\n' || ch == '"') ch = '\'';
  std::string line = "error kind=" + kind;
  if (!key.empty()) line += " key=" + key;
  return line + " message=\"" + m + "\"";
}

/// Full command: parse, validate, execute, write. Exit codes: 0 success,
/// 2 configuration, 3 numerical, 4 I/O.
inline RunStatus run(const std::string& command, const std::string& config_text, const Overrides& ov = {}) {
  try {
    RunConfig cfg = parse_config(config_text);
    if (!cfg.command.empty() && cfg.command != command)
      throw ConfigError("command", 0, "config is for command '" + cfg.command + "', not '" + command + "'");
    cfg.command = command;
    if (ov.output_dir) cfg.output_dir = *ov.output_dir;
    if (ov.seed) cfg.seed = *ov.seed;
    const ResolvedRun resolved = resolve(cfg);
    const auto artifacts = execute(resolved, resolve_threads(ov.threads));
    write_artifacts(cfg.output_dir, cfg, artifacts);
    return {0, ""};
  } catch (const ConfigError& e) {
    return {2, error_line("config", e.what(), e.key())};
  } catch (const IoError& e) {
    return {4, error_line("io", e.what())};
  } catch (const InvalidArgument& e) {
    return {2, error_line(e.kind(), e.what())};
  } catch (const Error& e) {
    return {3, error_line(e.kind(), e.what())};
  } catch (const std::exception& e) {
    return {3, error_line("numerical", e.what())};
  }
}

}  // namespace newtonflow::cli
