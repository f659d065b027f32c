#pragma once

#include "newtonflow/core.hpp"
#include "newtonflow/fields.hpp"
#include "newtonflow/grid.hpp"
#include "newtonflow/particles.hpp"
#include "newtonflow/transport.hpp"

#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace newtonflow {

// ---------------------------------------------------------------------------
// Density comparison
// ---------------------------------------------------------------------------

struct ComparisonReport {
  double time = 0.0;
  /// Sum over cells of |rho_a - rho_b| * cell volume.
  double l1_distance = 0.0;
  double max_abs = 0.0;
  double mass_1 = 0.0;
  double mass_2 = 0.0;
};

inline ComparisonReport compare_densities(const DensityField& a, const DensityField& b) {
  if (!(a.grid == b.grid)) throw GridMismatch();
  ComparisonReport r;
  r.time = a.time;
  double l1 = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const double d = std::abs(a.values[i] - b.values[i]);
    l1 += d;
    r.max_abs = std::max(r.max_abs, d);
  }
  const double vol = a.grid.cell_volume();
  r.l1_distance = l1 * vol;
  r.mass_1 = a.mass();
  r.mass_2 = b.mass();
  return r;
}

/// Fraction of the density's mass within Euclidean distance `radius` of
/// `point`, relative to its current mass (cell centres decide membership).
inline double mass_fraction_within(const DensityField& rho, const Vector& point, double radius) {
  double inside = 0.0, total = 0.0;
  for (std::size_t i = 0; i < rho.values.size(); ++i) {
    if (rho.values[i] == 0.0) continue;
    total += rho.values[i];
    if ((rho.grid.center(i) - point).norm() <= radius) inside += rho.values[i];
  }
  return total > 0 ? inside / total : 0.0;
}

inline double particle_fraction_within(const ParticleEnsemble& e, const Vector& point, double radius) {
  if (e.positions.empty()) return 0.0;
  std::size_t inside = 0;
  for (const auto& x : e.positions)
    if ((x - point).norm() <= radius) ++inside;
  return static_cast<double>(inside) / static_cast<double>(e.size());
}

// ---------------------------------------------------------------------------
// Particle vs PDE side by side
// ---------------------------------------------------------------------------

struct EquivalenceConfig {
  GaussianLaw init;
  std::size_t particles = 100'000;
  GridSpec grid;
  double dt = 0.05;
  double t_end = 1.0;
  std::vector<double> snapshot_times;
  std::uint64_t seed = 0;
  Method method = Method::rk4;
  TransportOptions transport;
  /// Particle integration step; <= 0 reuses the PDE sub-step.
  double particle_dt = 0.0;
};

struct EquivalenceSnapshot {
  ComparisonReport comparison;
  DensityField pde;
  DensityField particles;
  MomentReport pde_moments;
  /// Fraction of the initial particles that have left the grid.
  double escaped_fraction = 0.0;
  /// Cumulative PDE boundary outflow, relative to the initial mass.
  double outflow_fraction = 0.0;
  double escape_outflow_gap() const { return std::abs(escaped_fraction - outflow_fraction); }
};

/// Evolves a Gaussian initial condition both as a particle ensemble (drawn
/// from the Gaussian truncated to the grid) and as a grid density
/// (gaussian_density), and compares their histograms at each snapshot.
inline std::vector<EquivalenceSnapshot> equivalence_experiment(const VelocityField& field,
                                                               const EquivalenceConfig& cfg) {
  const DensityField rho0 = gaussian_density(cfg.grid, cfg.init.mean, cfg.init.cov);
  const TransportSolution pde =
      solve_transport(rho0, field, cfg.dt, cfg.t_end, cfg.snapshot_times, cfg.transport);
  const WorkingDomain domain = cfg.grid.domain();
  ParticleEnsemble ens = sample_initial(domain, cfg.init, cfg.particles, cfg.seed);
  const double pdt = cfg.particle_dt > 0 ? cfg.particle_dt : cfg.dt / static_cast<double>(pde.substeps);

  std::vector<EquivalenceSnapshot> out;
  std::size_t escaped = 0;
  double t = 0.0;
  for (std::size_t j = 0; j < pde.snapshots.size(); ++j) {
    const double target = pde.snapshots[j].time - rho0.time;
    require(target + 1e-12 >= t, "snapshot times must be nondecreasing");
    if (target > t) {
      auto adv = advance_ensemble(ens, field, pdt, target - t, cfg.method, domain, cfg.transport.threads);
      escaped += adv.escaped;
      ens = std::move(adv.ensemble);
      ens.time = target;
      t = target;
    }
    EquivalenceSnapshot s;
    s.pde = pde.snapshots[j];
    s.pde_moments = pde.reports[j];
    s.escaped_fraction = static_cast<double>(escaped) / static_cast<double>(cfg.particles);
    s.outflow_fraction = pde.outflow[j] / rho0.mass();
    if (ens.positions.empty()) {
      s.particles = DensityField(cfg.grid, s.pde.time);
    } else {
      s.particles = empirical_density(ens, cfg.grid);
      // Survivors carry 1/N each, not 1/N_alive.
      const double keep = static_cast<double>(ens.size()) / static_cast<double>(cfg.particles);
      for (double& v : s.particles.values) v *= keep;
    }
    s.particles.time = s.pde.time;
    s.comparison = compare_densities(s.pde, s.particles);
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// One-step moment lemmas
// ---------------------------------------------------------------------------

struct DriftLevel {
  double sigma = 0.0;
  double dt = 0.0;
  Vector observed_shift;
  Vector predicted_shift;
  double residual = 0.0;
};

struct DriftReport {
  std::vector<DriftLevel> levels;
  /// residual[h+1] / residual[h].
  std::vector<double> ratios;
  const DriftLevel& base() const { return levels.front(); }
};

namespace detail {

inline void require_resolved(const GridSpec& grid, double sigma) {
  for (double d : grid.dx())
    require(sigma >= 4.0 * d * (1.0 - 1e-12), "Gaussian width must be at least 4 cells (sigma=" + fmt17(sigma) + ")");
}

inline Matrix isotropic(int p, double sigma) { return Matrix::Identity(p, p) * sigma * sigma; }

}  // namespace detail

/// One transport step from a Gaussian(center, sigma^2 I): the mean shift is
/// compared with v(center) dt. The protocol repeats with sigma and dt halved
/// `halvings` times.
inline DriftReport drift_test(const VelocityField& field, const Vector& center, double sigma, double dt,
                              const GridSpec& grid, Scheme scheme = Scheme::donor_cell, int halvings = 2) {
  const TransportOperator op(field, grid, scheme);
  DriftReport rep;
  for (int h = 0; h <= halvings; ++h) {
    DriftLevel lv;
    lv.sigma = sigma / std::pow(2.0, h);
    lv.dt = dt / std::pow(2.0, h);
    detail::require_resolved(grid, lv.sigma);
    const DensityField rho = gaussian_density(grid, center, detail::isotropic(grid.dim(), lv.sigma));
    const DensityField next = op.step(rho, lv.dt).density;
    const MomentReport m0 = moment_report(rho, field);
    const MomentReport m1 = moment_report(next, field);
    lv.observed_shift = m1.mean - m0.mean;
    lv.predicted_shift = field(center) * lv.dt;
    lv.residual = (lv.observed_shift - lv.predicted_shift).norm();
    rep.levels.push_back(std::move(lv));
  }
  for (std::size_t h = 1; h < rep.levels.size(); ++h)
    rep.ratios.push_back(rep.levels[h].residual / rep.levels[h - 1].residual);
  return rep;
}

struct VarianceLevel {
  double sigma = 0.0;
  double dt = 0.0;
  /// ||cov(t+dt) - cov(t)||_max.
  double delta_cov_norm = 0.0;
  /// delta_cov_norm / (sigma^2 dt).
  double normalized = 0.0;
  /// ||dC_v - dC_w||_max / (sigma^2 dt), where w is the linearization of v at
  /// the centre, both steps taken on the same grid and each dC recentred by
  /// adding back its mean-shift outer product. Isolates the part of the
  /// covariance change that is not O(Sigma) dt.
  double nonlinear_part = 0.0;
};

struct VarianceReport {
  std::vector<VarianceLevel> levels;
  std::vector<double> normalized_ratios;
  std::vector<double> nonlinear_ratios;
  const VarianceLevel& base() const { return levels.front(); }
};

inline VarianceReport variance_test(const VelocityField& field, const Vector& center, double sigma, double dt,
                                    const GridSpec& grid, Scheme scheme = Scheme::donor_cell, int halvings = 2) {
  const Vector v0 = field(center);
  const Matrix jac = field.jacobian(center);
  const VelocityField linear(
      field.dim(), [v0, jac, center](const Vector& x) -> Vector { return v0 + jac * (x - center); },
      MatrixMap([jac](const Vector&) { return jac; }), "linearized");
  const TransportOperator op(field, grid, scheme);
  const TransportOperator op_lin(linear, grid, scheme);
  const VelocityField zero(field.dim(), [](const Vector& x) -> Vector { return Vector::Zero(x.size()); });

  auto recentred_change = [&](const TransportOperator& o, const DensityField& rho, const MomentReport& m0, double h) {
    const MomentReport m1 = moment_report(o.step(rho, h).density, zero);
    const Vector shift = m1.mean - m0.mean;
    return Matrix(m1.covariance - m0.covariance + shift * shift.transpose());
  };

  VarianceReport rep;
  for (int h = 0; h <= halvings; ++h) {
    VarianceLevel lv;
    lv.sigma = sigma / std::pow(2.0, h);
    lv.dt = dt / std::pow(2.0, h);
    detail::require_resolved(grid, lv.sigma);
    const DensityField rho = gaussian_density(grid, center, detail::isotropic(grid.dim(), lv.sigma));
    const MomentReport m0 = moment_report(rho, zero);
    const MomentReport m1 = moment_report(op.step(rho, lv.dt).density, zero);
    const double scale = lv.sigma * lv.sigma * lv.dt;
    lv.delta_cov_norm = (m1.covariance - m0.covariance).cwiseAbs().maxCoeff();
    lv.normalized = lv.delta_cov_norm / scale;
    const Matrix dv = recentred_change(op, rho, m0, lv.dt);
    const Matrix dw = recentred_change(op_lin, rho, m0, lv.dt);
    lv.nonlinear_part = (dv - dw).cwiseAbs().maxCoeff() / scale;
    rep.levels.push_back(lv);
  }
  for (std::size_t h = 1; h < rep.levels.size(); ++h) {
    rep.normalized_ratios.push_back(rep.levels[h].normalized / rep.levels[h - 1].normalized);
    rep.nonlinear_ratios.push_back(rep.levels[h].nonlinear_part / rep.levels[h - 1].nonlinear_part);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Velocity identification
// ---------------------------------------------------------------------------

struct IdentificationReport {
  /// Interior L1 residual of the discrete continuity equation per candidate.
  std::vector<double> residuals;
  std::size_t best = 0;
  /// False when the two smallest residuals tie within tolerance.
  bool identifiable = true;
};

/// For each candidate w, evaluates
///   sum over interior cells of |(rho1 - rho0)/dt + div_h(w rho0)| * vol,
/// with div_h the first-order upwind flux divergence. Cells touching the
/// boundary are skipped: the outflow condition is not part of the equation.
inline IdentificationReport velocity_identification(const DensityField& rho0, const DensityField& rho1,
                                                    const std::vector<VelocityField>& candidates,
                                                    double tie_tolerance = 1e-9) {
  if (!(rho0.grid == rho1.grid)) throw GridMismatch();
  require(!candidates.empty(), "need at least one candidate field");
  const double dt = rho1.time - rho0.time;
  require(dt > 0, "snapshots must be in increasing time order");
  const GridSpec& g = rho0.grid;
  IdentificationReport rep;
  for (const auto& w : candidates) {
    const TransportOperator op(w, g);
    const auto rate = op.upwind_rate(rho0.values);
    double res = 0.0;
    for (std::size_t i = 0; i < rate.size(); ++i) {
      const auto idx = g.unravel(i);
      bool interior = true;
      for (int k = 0; k < g.dim(); ++k) interior = interior && idx[k] > 0 && idx[k] + 1 < g.cells()[k];
      if (interior) res += std::abs((rho1.values[i] - rho0.values[i]) / dt - rate[i]);
    }
    rep.residuals.push_back(res * g.cell_volume());
  }
  std::size_t second = rep.residuals.size();
  for (std::size_t c = 1; c < rep.residuals.size(); ++c)
    if (rep.residuals[c] < rep.residuals[rep.best]) rep.best = c;
  for (std::size_t c = 0; c < rep.residuals.size(); ++c)
    if (c != rep.best && (second == rep.residuals.size() || rep.residuals[c] < rep.residuals[second])) second = c;
  if (second < rep.residuals.size()) {
    const double tol = tie_tolerance * std::max({rep.residuals[second], rho0.mass() / dt, 1e-300});
    rep.identifiable = rep.residuals[second] - rep.residuals[rep.best] > tol;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Delta-function surrogate
// ---------------------------------------------------------------------------

using ScalarMap = std::function<double(const Vector&)>;

struct SurrogateLevel {
  double sigma = 0.0;
  /// Quadrature of f against delta_sigma - grad(delta_sigma) . v(x0) dt.
  double surrogate = 0.0;
  /// f(x0 + v(x0) dt).
  double exact = 0.0;
  double error = 0.0;
};

struct SurrogateReport {
  /// One entry per test function, each holding the sigma and sigma/2 levels.
  std::vector<std::vector<SurrogateLevel>> levels;
  /// error(sigma/2) / error(sigma) per test function.
  std::vector<double> ratios;
};

/// Replaces the Dirac delta at x0 by an isotropic Gaussian of width sigma and
/// checks the first-order shift identity
///   integral f(y) (delta(y - x0) - grad delta(y - x0) . v(x0) dt) dy
///     = f(x0 + v(x0) dt)
/// by cell-centre quadrature on `grid`, at sigma and sigma/2.
inline SurrogateReport delta_surrogate_test(const VelocityField& field, const Vector& x0, double sigma, double dt,
                                            const std::vector<ScalarMap>& test_functions, const GridSpec& grid) {
  require(field.dim() == grid.dim() && x0.size() == grid.dim(), "dimension mismatch");
  for (double d : grid.dx())
    require(sigma / 2.0 >= 3.0 * d, "quadrature grid too coarse: need sigma/2 >= 3 dx");
  const Vector shift = field(x0) * dt;
  const int p = grid.dim();
  const double vol = grid.cell_volume();
  SurrogateReport rep;
  for (const auto& f : test_functions) {
    std::vector<SurrogateLevel> lv;
    for (double s : {sigma, sigma / 2.0}) {
      SurrogateLevel l;
      l.sigma = s;
      const double norm = std::pow(2.0 * M_PI * s * s, -0.5 * p);
      double acc = 0.0;
      for (std::size_t i = 0; i < grid.cell_count(); ++i) {
        const Vector y = grid.center(i);
        const Vector u = y - x0;
        const double delta = norm * std::exp(-0.5 * u.squaredNorm() / (s * s));
        // grad delta(u) = -u / s^2 * delta(u)
        const double kernel = delta + delta * u.dot(shift) / (s * s);
        acc += f(y) * kernel * vol;
      }
      l.surrogate = acc;
      l.exact = f(x0 + shift);
      l.error = std::abs(l.surrogate - l.exact);
      lv.push_back(l);
    }
    rep.ratios.push_back(lv[1].error / lv[0].error);
    rep.levels.push_back(std::move(lv));
  }
  return rep;
}

}  // namespace newtonflow
