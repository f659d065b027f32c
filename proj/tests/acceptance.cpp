// Acceptance suite: one PASS/FAIL line per criterion, tolerances pinned here.
#include "newtonflow/builtin_fields.hpp"
#include "newtonflow/equivalence.hpp"
#include "newtonflow/glm.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <string>

using namespace newtonflow;

namespace {

constexpr std::uint64_t kSeed = 20240101;

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void check(int id, const char* name, double budget_s, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("threw: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (secs > budget_s) {
    o.pass = false;
    o.detail += " [over runtime budget]";
  }
  if (!o.pass) ++failures;
  std::printf("%s  %2d %-28s %s (%.2fs, budget %.0fs)\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), secs,
              budget_s);
  std::fflush(stdout);
}

std::string fmt(const char* f, double a) {
  char buf[96];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

GridSpec cube(int p, double lower, double dx, std::size_t cells) {
  return GridSpec(std::vector<double>(p, lower), std::vector<double>(p, dx), std::vector<std::size_t>(p, cells));
}

// Largest dt <= the stable step that divides t_end evenly.
double even_dt(double stable, double t_end) { return t_end / std::ceil(t_end / stable - 1e-12); }

// v = -x, 1-D, Gaussian(0.5, 0.2^2), dx = 0.01, CFL 0.9, t = 1.
struct DecaySetting {
  VelocityField field = linear_decay_field(1);
  GridSpec grid = GridSpec({-0.5}, {0.01}, {200});
  Vector mean = Vector::Constant(1, 0.5);
  Matrix cov = Matrix::Constant(1, 1, 0.04);
  double dt(Scheme s) const { return even_dt(max_stable_dt(field, grid, 0.9, s), 1.0); }
};

void info(const std::string& line) { std::printf("      %s\n", line.c_str()); }

}  // namespace

int main() {
  const Vector beta3 = (Vector(3) << -0.2, 0.2, -0.2).finished();
  const Vector beta2 = (Vector(2) << -0.2, 0.2).finished();

  check(1, "glm-reproduction-3d", 900, [&] {
    const glm::Dataset d = glm::simulate(200, beta3, derive_seed(kSeed, 0));
    const auto mle = glm::fisher_scoring_solve(d, Vector::Zero(3));
    const double s_inf = glm::score(d, mle.beta_hat).lpNorm<Eigen::Infinity>();
    const GridSpec g = cube(3, -1.025, 0.05, 41);
    const DensityField rho0 = gaussian_density(g, Vector::Zero(3), Matrix::Identity(3, 3) * 0.0625);
    const auto sol = solve_transport(rho0, glm::fisher_field(d), 0.05, 2.0, {2.0});
    const DensityField& rho = sol.snapshots.back();
    const double frac = mass_fraction_within(rho, mle.beta_hat, 0.2);
    return Outcome{frac >= 0.90 && s_inf <= 1e-10,
                   "mass within 0.2 of beta_hat " + fmt("%.4f", frac) + " (>= 0.90), ||S(beta_hat)||inf " +
                       fmt("%.1e", s_inf) + " (<= 1e-10), remaining mass " + fmt("%.4f", rho.mass()) +
                       ", substeps " + std::to_string(sol.substeps)};
  });

  check(2, "analytic-transport-oracle", 10, [&] {
    const DecaySetting s;
    const DensityField rho0 = gaussian_density(s.grid, s.mean, s.cov);
    auto run = [&](Scheme scheme) {
      TransportOptions opt;
      opt.scheme = scheme;
      return solve_transport(rho0, s.field, s.dt(scheme), 1.0, {1.0}, opt).reports.back();
    };
    const double mean_ref = 0.5 * std::exp(-1.0), sd_ref = 0.2 * std::exp(-1.0);
    const auto dc = run(Scheme::donor_cell);
    info("donor-cell: mean err " + fmt("%.2f%%", 100 * (dc.mean[0] / mean_ref - 1)) + ", sd err " +
         fmt("%.2f%%", 100 * (std::sqrt(dc.covariance(0, 0)) / sd_ref - 1)));
    const auto m = run(Scheme::muscl_minmod);
    const double em = std::abs(m.mean[0] / mean_ref - 1), es = std::abs(std::sqrt(m.covariance(0, 0)) / sd_ref - 1);
    return Outcome{em <= 0.02 && es <= 0.05, "muscl-minmod: mean err " + fmt("%.3f%%", 100 * em) +
                                                 " (<= 2%), sd err " + fmt("%.3f%%", 100 * es) + " (<= 5%)"};
  });

  check(3, "particle-pde-equivalence", 30, [&] {
    const DecaySetting s;
    EquivalenceConfig cfg;
    cfg.init = {s.mean, s.cov};
    cfg.particles = 100'000;
    cfg.grid = s.grid;
    cfg.t_end = 1.0;
    cfg.snapshot_times = {1.0};
    cfg.seed = derive_seed(kSeed, 1);
    cfg.method = Method::rk4;
    cfg.transport.scheme = Scheme::muscl_minmod;
    cfg.dt = s.dt(Scheme::muscl_minmod);
    const double l1 = equivalence_experiment(s.field, cfg).back().comparison.l1_distance;
    cfg.transport.scheme = Scheme::donor_cell;
    cfg.dt = s.dt(Scheme::donor_cell);
    info("donor-cell: L1 " + fmt("%.4f", equivalence_experiment(s.field, cfg).back().comparison.l1_distance));
    return Outcome{l1 <= 0.05, "muscl-minmod L1 at t=1 " + fmt("%.4f", l1) + " (<= 0.05)"};
  });

  check(4, "drift-lemma", 5, [&] {
    const auto rep = drift_test(cubic_decay_field(1), Vector::Constant(1, 0.5), 0.05, 1e-3, GridSpec({0.25}, {0.001}, {500}));
    bool ok = rep.base().residual <= 1e-4;
    std::string ratios;
    for (double r : rep.ratios) {
      ok = ok && r <= 0.5;
      ratios += fmt(" %.3f", r);
    }
    return Outcome{ok, "residual " + fmt("%.2e", rep.base().residual) + " (<= 1e-4), halving ratios" + ratios +
                           " (<= 0.5)"};
  });

  check(5, "variance-lemma", 5, [&] {
    const auto rep =
        variance_test(cubic_decay_field(1), Vector::Constant(1, 0.5), 0.05, 1e-3, GridSpec({0.32}, {4e-4}, {900}));
    bool ok = true;
    std::string norm, nonlin;
    for (const auto& lv : rep.levels) {
      ok = ok && lv.normalized <= 4.0;
      norm += fmt(" %.3f", lv.normalized);
      nonlin += fmt(" %.2e", lv.nonlinear_part);
    }
    for (double r : rep.nonlinear_ratios) ok = ok && r < 1.0;
    return Outcome{ok, "normalized" + norm + " (<= 4), nonlinear part" + nonlin + " (strictly decreasing)"};
  });

  check(6, "mass-conservation", 10, [&] {
    const GridSpec g = cube(2, -1.0, 1.0 / 32, 64);
    DensityField rho(g);
    const Vector c = (Vector(2) << 0.3, -0.2).finished();
    for (std::size_t i = 0; i < g.cell_count(); ++i) {
      const double r = (g.center(i) - c).norm() / 0.25;
      rho.values[i] = r < 1 ? std::pow(std::cos(0.5 * M_PI * r), 2) : 0.0;
    }
    const double m0 = rho.mass();
    const VelocityField f = linear_decay_field(2);
    const TransportOperator op(f, g);
    const double dt = op.max_stable_dt(0.9);
    double outflow = 0.0;
    for (int s = 0; s < 1000; ++s) {
      auto r = op.step(rho, dt);
      outflow += r.outflow;
      rho = std::move(r.density);
    }
    const double drift = std::abs(rho.mass() - m0) / m0;
    return Outcome{drift <= 1e-10, "relative mass drift after 1000 steps " + fmt("%.2e", drift) +
                                       " (<= 1e-10), outflow " + fmt("%.1e", outflow)};
  });

  check(7, "bartlett-identities", 60, [&] {
    const auto rep = glm::bartlett_check(beta3, 200, 1000, derive_seed(kSeed, 2), glm::CovariateLaw::standard_normal,
                                         resolve_threads());
    double worst1 = 0.0, worst2 = 0.0;
    for (Eigen::Index k = 0; k < rep.mean_score.size(); ++k)
      worst1 = std::max(worst1, std::abs(rep.mean_score[k]) / rep.score_std_error[k]);
    const Matrix gap = rep.identity_gap();
    for (Eigen::Index i = 0; i < gap.rows(); ++i)
      for (Eigen::Index j = 0; j < gap.cols(); ++j)
        worst2 = std::max(worst2, std::abs(gap(i, j)) / rep.identity_std_error(i, j));
    const double closed = (rep.mean_neg_hessian - rep.fisher).cwiseAbs().maxCoeff() / rep.fisher.cwiseAbs().maxCoeff();
    const bool ok = rep.first_identity_holds(3.0) && rep.second_identity_holds(3.0) && closed <= 1e-6;
    return Outcome{ok, "max |mean S|/SE " + fmt("%.2f", worst1) + " (<= 3), max |mean(-dS) - mean SS'|/SE " +
                           fmt("%.2f", worst2) + " (<= 3), |mean(-dS) - mean I|max/|I|max " + fmt("%.1e", closed) +
                           " (<= 1e-6)"};
  });

  check(8, "canonical-link-identity", 10, [&] {
    const glm::Dataset d = glm::simulate(200, beta3, derive_seed(kSeed, 3));
    std::mt19937_64 rng(derive_seed(kSeed, 4));
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    const VectorMap s = [&d](const Vector& b) { return glm::score(d, b); };
    double worst = 0.0;
    for (int k = 0; k < 50; ++k) {
      Vector b(3);
      for (auto& x : b) x = u(rng);
      const Matrix info = glm::fisher(d, b);
      const Matrix fd = -numeric_jacobian(s, b);
      worst = std::max(worst, (info - fd).cwiseAbs().maxCoeff() / info.cwiseAbs().maxCoeff());
    }
    return Outcome{worst <= 1e-4, "max relative error over 50 beta " + fmt("%.2e", worst) + " (<= 1e-4)"};
  });

  check(9, "momenta-decay", 300, [&] {
    const glm::Dataset d = glm::simulate(200, beta2, derive_seed(kSeed, 0));
    const GridSpec g = cube(2, -1.025, 0.05, 41);
    const DensityField rho0 = gaussian_density(g, Vector::Zero(2), Matrix::Identity(2, 2) * 0.0625);
    const auto sol = solve_transport(rho0, glm::score_field(d), 0.05, 2.0, {0.0, 0.5, 1.0, 2.0});
    const double e0 = sol.reports.front().momenta;
    bool ok = true;
    std::string es;
    for (std::size_t j = 0; j < sol.reports.size(); ++j) {
      es += fmt(" %.4g", sol.reports[j].momenta);
      if (j > 0) ok = ok && sol.reports[j].momenta <= sol.reports[j - 1].momenta + 1e-3 * e0;
    }
    return Outcome{ok, "E(t) at t=0,0.5,1,2:" + es + " (non-increasing, slack 1e-3 E(0))"};
  });

  check(10, "velocity-identification", 60, [&] {
    std::mt19937_64 rng(derive_seed(kSeed, 5));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    int correct = 0;
    for (int c = 0; c < 20; ++c) {
      const int p = 1 + c % 2;
      const GridSpec g = p == 1 ? GridSpec({-1.0}, {0.01}, {200}) : cube(2, -1.0, 0.025, 80);
      // Random affine field a (m - x) plus, in 2-D, a random rotation rate.
      const Vector a = Vector::NullaryExpr(p, [&] { return 0.5 + 1.5 * u(rng); });
      const Vector m = Vector::NullaryExpr(p, [&] { return -0.4 + 0.8 * u(rng); });
      const double w = p == 2 ? -1.0 + 2.0 * u(rng) : 0.0;
      const auto affine = [a, m, w](const Vector& x) -> Vector {
        Vector v = a.cwiseProduct(m - x);
        if (x.size() == 2) {
          v[0] -= w * x[1];
          v[1] += w * x[0];
        }
        return v;
      };
      const VelocityField v(p, affine);
      const VelocityField v2(p, [affine](const Vector& x) -> Vector { return 2.0 * affine(x); });
      const VelocityField v3(p, [affine](const Vector& x) -> Vector { return (affine(x).array() + 0.5).matrix(); });
      const VelocityField v4(p, [affine](const Vector& x) -> Vector { return -affine(x); });
      const Vector c0 = Vector::NullaryExpr(p, [&] { return -0.3 + 0.6 * u(rng); });
      const double sd = 0.12 + 0.08 * u(rng);
      const DensityField rho0 = gaussian_density(g, c0, Matrix::Identity(p, p) * sd * sd);
      // The later snapshot comes from the second-order scheme, so the
      // residual of the true field is not identically zero.
      const TransportOperator op(v, g, Scheme::muscl_minmod);
      DensityField rho1 = op.step(rho0, 0.5 * op.max_stable_dt(0.9)).density;
      const auto rep = velocity_identification(rho0, rho1, {v, v2, v3, v4});
      if (rep.best == 0 && rep.identifiable) ++correct;
    }
    return Outcome{correct == 20, "true field minimal in " + std::to_string(correct) + "/20 cases (20/20)"};
  });

  check(11, "integrator-orders", 2, [&] {
    const VelocityField f = linear_decay_field(1);
    const Vector x0 = Vector::Constant(1, 1.0);
    auto err = [&](Method m, double dt) {
      return std::abs(integrate(f, x0, dt, 1.0, m).final_state()[0] - std::exp(-1.0));
    };
    const double rk = err(Method::rk4, 0.05) / err(Method::rk4, 0.1);
    const double eu = err(Method::euler, 0.05) / err(Method::euler, 0.1);
    const bool ok = rk >= 1.0 / 20 && rk <= 1.0 / 12 && eu >= 0.4 && eu <= 0.6;
    return Outcome{ok, "rk4 ratio " + fmt("%.4f", rk) + " (in [1/20, 1/12]), euler ratio " + fmt("%.4f", eu) +
                           " (in [0.4, 0.6])"};
  });

  check(12, "delta-surrogate", 5, [&] {
    const ScalarMap sq = [](const Vector& x) { return x[0] * x[0]; };
    const auto rep = delta_surrogate_test(linear_decay_field(1), Vector::Constant(1, 0.5), 0.1, 1e-3, {sq},
                                          GridSpec({-1.0}, {0.001}, {3000}));
    const double r = rep.ratios.front();
    return Outcome{r >= 0.2 && r <= 0.35, "error ratio under sigma-halving " + fmt("%.4f", r) + " (in [0.2, 0.35])"};
  });

  std::printf("%d of 12 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
