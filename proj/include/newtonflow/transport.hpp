#pragma once

#include "newtonflow/core.hpp"
#include "newtonflow/fields.hpp"
#include "newtonflow/grid.hpp"

#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace newtonflow {

/// Finite-volume reconstruction for the continuity equation.
///  - donor_cell: first-order upwind with forward Euler.
///  - muscl_minmod: minmod-limited linear reconstruction with the two-stage
///    SSP Runge-Kutta (Heun) step; stable and positive for half the donor-cell
///    time step.
enum class Scheme { donor_cell, muscl_minmod };

inline Scheme parse_scheme(const std::string& s) {
  if (s == "donor-cell" || s == "donor_cell" || s == "upwind") return Scheme::donor_cell;
  if (s == "muscl-minmod" || s == "muscl_minmod" || s == "muscl") return Scheme::muscl_minmod;
  throw InvalidArgument("unknown transport scheme '" + s + "'");
}

inline const char* to_string(Scheme s) { return s == Scheme::donor_cell ? "donor-cell" : "muscl-minmod"; }

inline constexpr double kCflEpsilon = 1e-12;
inline constexpr double kMaxTimeStep = 1.0;
inline constexpr double kNegativeTolerance = 1e-14;

struct StepResult {
  DensityField density;
  /// Mass that left through the outflow boundary during the step.
  double outflow = 0.0;
};

/// Face velocities of a time-independent field on a fixed grid, evaluated
/// once at the geometric face midpoints, plus the conservative update.
///
/// Every face flux is a function of the face velocity and the two adjacent
/// cells only and enters the two cells with opposite signs, so total mass
/// changes only through the boundary faces. Inflow through the boundary is
/// zero; outflow leaves the system and is reported.
class TransportOperator {
 public:
  TransportOperator(const VelocityField& field, const GridSpec& grid, Scheme scheme = Scheme::donor_cell,
                    unsigned threads = 1)
      : grid_(grid), scheme_(scheme), threads_(threads) {
    require(field.dim() == grid.dim(), "field and grid dimensions differ");
    const std::size_t n = grid.cell_count();
    const int p = grid.dim();
    low_.assign(p, std::vector<double>(n, 0.0));
    high_.assign(p, std::vector<double>(n, 0.0));
    parallel_for(n, threads_, [&](std::size_t i) {
      const auto idx = grid.unravel(i);
      Vector face = grid.center(i);
      for (int k = 0; k < p; ++k) {
        const double c = face[k];
        face[k] = c - 0.5 * grid.dx()[k];
        low_[k][i] = field(face)[k];
        if (idx[k] == grid.cells()[k] - 1) {
          face[k] = c + 0.5 * grid.dx()[k];
          high_[k][i] = field(face)[k];
        }
        face[k] = c;
      }
    });
    for (int k = 0; k < p; ++k) {
      const std::size_t s = grid.stride(k);
      for (std::size_t i = 0; i < n; ++i)
        if (grid.unravel(i)[k] != grid.cells()[k] - 1) high_[k][i] = low_[k][i + s];
    }
    out_rate_.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (int k = 0; k < p; ++k)
        out_rate_[i] += (std::max(high_[k][i], 0.0) + std::max(-low_[k][i], 0.0)) / grid.dx()[k];
    max_rate_ = 0.0;
    for (double r : out_rate_) max_rate_ = std::max(max_rate_, r);
  }

  const GridSpec& grid() const { return grid_; }
  Scheme scheme() const { return scheme_; }

  /// Velocity component k on the low / high face of a cell.
  double low_face(int axis, std::size_t cell) const { return low_[axis][cell]; }
  double high_face(int axis, std::size_t cell) const { return high_[axis][cell]; }

  /// Largest dt keeping every cell's outgoing Courant sum
  /// dt * sum_k (outflow speed on axis k) / dx_k below `cfl` (halved for
  /// MUSCL), capped at 1. In one dimension with a uniform velocity this is
  /// cfl * dx / |v|.
  double max_stable_dt(double cfl = 1.0) const {
    require(cfl > 0 && cfl <= 1, "cfl must lie in (0, 1]");
    const double factor = scheme_ == Scheme::donor_cell ? 1.0 : 0.5;
    return std::min(kMaxTimeStep, factor * cfl / (max_rate_ + kCflEpsilon));
  }

  /// One explicit step. Refuses steps above the stability limit and raises
  /// SchemeError when a value drops below -1e-14 (relative to the peak density
  /// when that exceeds 1); smaller round-off negatives are set to zero.
  StepResult step(const DensityField& rho, double dt) const {
    require(rho.grid == grid_, "density grid does not match the operator grid");
    require(dt >= 0, "dt must be nonnegative");
    const double limit = max_stable_dt(1.0);
    if (dt > limit * (1.0 + 1e-12)) throw StabilityError(dt, limit);

    StepResult r{DensityField(grid_, rho.time + dt), 0.0};
    if (scheme_ == Scheme::donor_cell) {
      r.outflow = donor_update(rho.values, dt, r.density.values);
    } else {
      std::vector<double> rate, stage(rho.values.size());
      const double out0 = muscl_rate(rho.values, rate);
      for (std::size_t i = 0; i < stage.size(); ++i) stage[i] = rho.values[i] + dt * rate[i];
      const double out1 = muscl_rate(stage, rate);
      for (std::size_t i = 0; i < stage.size(); ++i)
        r.density.values[i] = 0.5 * rho.values[i] + 0.5 * (stage[i] + dt * rate[i]);
      r.outflow = 0.5 * dt * (out0 + out1) * grid_.cell_volume();
    }
    check_positivity(rho.values, r.density.values);
    return r;
  }

  /// Discrete -div(v rho) from first-order upwind face fluxes (no time
  /// stepping). Used for PDE residuals.
  std::vector<double> upwind_rate(const std::vector<double>& rho) const {
    const std::size_t n = rho.size();
    const int p = grid_.dim();
    std::vector<double> rate(n, 0.0);
    parallel_for(n, threads_, [&](std::size_t i) {
      const auto idx = grid_.unravel(i);
      double acc = 0.0;
      for (int k = 0; k < p; ++k) {
        const std::size_t s = grid_.stride(k);
        const double vl = low_[k][i], vh = high_[k][i];
        const double below = idx[k] > 0 ? rho[i - s] : 0.0;
        const double above = idx[k] + 1 < grid_.cells()[k] ? rho[i + s] : 0.0;
        const double f_low = vl > 0 ? vl * below : vl * rho[i];
        const double f_high = vh > 0 ? vh * rho[i] : vh * above;
        acc -= (f_high - f_low) / grid_.dx()[k];
      }
      rate[i] = acc;
    });
    return rate;
  }

 private:
  // new_i = rho_i (1 - dt * out_rate_i) + dt * inflow_i keeps every term
  // nonnegative when dt * out_rate_i <= 1.
  double donor_update(const std::vector<double>& rho, double dt, std::vector<double>& out) const {
    const std::size_t n = rho.size();
    const int p = grid_.dim();
    std::vector<double> boundary(n, 0.0);
    parallel_for(n, threads_, [&](std::size_t i) {
      const auto idx = grid_.unravel(i);
      double inflow = 0.0, lost = 0.0;
      for (int k = 0; k < p; ++k) {
        const std::size_t s = grid_.stride(k);
        const double inv_dx = 1.0 / grid_.dx()[k];
        const double vl = low_[k][i], vh = high_[k][i];
        if (idx[k] > 0) {
          if (vl > 0) inflow += vl * rho[i - s] * inv_dx;
        } else if (vl < 0) {
          lost += -vl * inv_dx;
        }
        if (idx[k] + 1 < grid_.cells()[k]) {
          if (vh < 0) inflow += -vh * rho[i + s] * inv_dx;
        } else if (vh > 0) {
          lost += vh * inv_dx;
        }
      }
      out[i] = rho[i] * (1.0 - dt * out_rate_[i]) + dt * inflow;
      boundary[i] = dt * lost * rho[i];
    });
    double total = 0.0;
    for (double b : boundary) total += b;
    return total * grid_.cell_volume();
  }

  static double minmod(double a, double b) {
    if (a * b <= 0) return 0.0;
    return a > 0 ? std::min(a, b) : std::max(a, b);
  }

  // Fills rate = -div(F) and returns the boundary outflow rate per unit cell
  // volume (summed over cells).
  double muscl_rate(const std::vector<double>& rho, std::vector<double>& rate) const {
    const std::size_t n = rho.size();
    const int p = grid_.dim();
    std::vector<std::vector<double>> slope(p, std::vector<double>(n));
    parallel_for(n, threads_, [&](std::size_t i) {
      const auto idx = grid_.unravel(i);
      for (int k = 0; k < p; ++k) {
        const std::size_t s = grid_.stride(k);
        const double below = idx[k] > 0 ? rho[i - s] : 0.0;
        const double above = idx[k] + 1 < grid_.cells()[k] ? rho[i + s] : 0.0;
        slope[k][i] = minmod(rho[i] - below, above - rho[i]);
      }
    });
    rate.assign(n, 0.0);
    std::vector<double> boundary(n, 0.0);
    parallel_for(n, threads_, [&](std::size_t i) {
      const auto idx = grid_.unravel(i);
      double acc = 0.0, lost = 0.0;
      for (int k = 0; k < p; ++k) {
        const std::size_t s = grid_.stride(k);
        const double inv_dx = 1.0 / grid_.dx()[k];
        const double vl = low_[k][i], vh = high_[k][i];
        const double own_low = rho[i] - 0.5 * slope[k][i];
        const double own_high = rho[i] + 0.5 * slope[k][i];
        double f_low, f_high;
        if (idx[k] > 0) {
          f_low = vl > 0 ? vl * (rho[i - s] + 0.5 * slope[k][i - s]) : vl * own_low;
        } else {
          f_low = vl > 0 ? 0.0 : vl * own_low;
          lost += -f_low * inv_dx;
        }
        if (idx[k] + 1 < grid_.cells()[k]) {
          f_high = vh > 0 ? vh * own_high : vh * (rho[i + s] - 0.5 * slope[k][i + s]);
        } else {
          f_high = vh > 0 ? vh * own_high : 0.0;
          lost += f_high * inv_dx;
        }
        acc -= (f_high - f_low) * inv_dx;
      }
      rate[i] = acc;
      boundary[i] = lost;
    });
    double total = 0.0;
    for (double b : boundary) total += b;
    return total;
  }

  static void check_positivity(const std::vector<double>& before, std::vector<double>& after) {
    double peak = 1.0;
    for (double v : before) peak = std::max(peak, v);
    const double floor = -kNegativeTolerance * peak;
    for (double& v : after) {
      if (v < 0) {
        if (v < floor) throw SchemeError("negative density " + fmt17(v) + " after transport step");
        v = 0.0;
      }
    }
  }

  GridSpec grid_;
  Scheme scheme_;
  unsigned threads_;
  std::vector<std::vector<double>> low_, high_;
  std::vector<double> out_rate_;
  double max_rate_ = 0.0;
};

inline double max_stable_dt(const VelocityField& field, const GridSpec& grid, double cfl,
                            Scheme scheme = Scheme::donor_cell) {
  return TransportOperator(field, grid, scheme).max_stable_dt(cfl);
}

inline DensityField transport_step(const DensityField& rho, const VelocityField& field, double dt,
                                   Scheme scheme = Scheme::donor_cell) {
  return TransportOperator(field, rho.grid, scheme).step(rho, dt).density;
}

// ---------------------------------------------------------------------------
// Moments
// ---------------------------------------------------------------------------

struct MomentReport {
  double time = 0.0;
  double mass = 0.0;
  Vector mean;
  Matrix covariance;
  /// E(t) = integral of |v|^2 rho, not normalized by mass.
  double momenta = 0.0;
};

/// Cell-centre midpoint quadrature. Mean and covariance are normalized by
/// the current mass.
inline MomentReport moment_report(const DensityField& rho, const VelocityField& field) {
  const GridSpec& g = rho.grid;
  require(field.dim() == g.dim(), "field and grid dimensions differ");
  const int p = g.dim();
  const double vol = g.cell_volume();
  MomentReport r;
  r.time = rho.time;
  r.mass = rho.mass();
  if (!(r.mass > 0)) throw InvalidArgument("moment report of a density with zero mass");
  r.mean = Vector::Zero(p);
  for (std::size_t i = 0; i < rho.values.size(); ++i)
    if (rho.values[i] != 0.0) r.mean += rho.values[i] * vol * g.center(i);
  r.mean /= r.mass;
  r.covariance = Matrix::Zero(p, p);
  double momenta = 0.0;
  for (std::size_t i = 0; i < rho.values.size(); ++i) {
    if (rho.values[i] == 0.0) continue;
    const Vector x = g.center(i);
    const double m = rho.values[i] * vol;
    const Vector d = x - r.mean;
    r.covariance.noalias() += m * d * d.transpose();
    momenta += m * field(x).squaredNorm();
  }
  r.covariance /= r.mass;
  r.covariance = 0.5 * (r.covariance + r.covariance.transpose());
  r.momenta = momenta;
  return r;
}

// ---------------------------------------------------------------------------
// Initial densities
// ---------------------------------------------------------------------------

/// Gaussian pdf at cell centres, renormalized to unit mass. Refuses when the
/// grid may hold less than 99.9% of the Gaussian mass, bounded from below by
/// one minus the summed per-axis marginal tail masses.
inline DensityField gaussian_density(const GridSpec& grid, const Vector& mean, const Matrix& cov, double time = 0.0) {
  const int p = grid.dim();
  require(mean.size() == p && cov.rows() == p && cov.cols() == p, "Gaussian parameters do not match grid dimension");
  Eigen::LLT<Matrix> llt(cov);
  if (llt.info() != Eigen::Success) throw IndefiniteInformation(mean, detail::failing_leading_minor(cov));
  require(grid.domain().contains(mean), "Gaussian mean lies outside the grid");

  double tail = 0.0;
  std::vector<double> lo(p), hi(p);
  for (int k = 0; k < p; ++k) {
    const double sd = std::sqrt(cov(k, k));
    const double zl = (mean[k] - grid.lower()[k]) / sd;
    const double zu = (grid.upper(k) - mean[k]) / sd;
    tail += 0.5 * std::erfc(zl / std::sqrt(2.0)) + 0.5 * std::erfc(zu / std::sqrt(2.0));
    // 3.5 sd per side per axis keeps the union bound below 1e-3 for p <= 4.
    lo[k] = mean[k] - 3.5 * sd;
    hi[k] = mean[k] + 3.5 * sd;
  }
  if (tail > 1e-3)
    throw GridTooSmall("grid holds less than 99.9% of the Gaussian mass (tail bound " + fmt17(tail) +
                           "); suggested lower=" + join17(lo) + " upper=" + join17(hi),
                       lo, hi);

  const Matrix l = llt.matrixL();
  DensityField rho(grid, time);
  double sum = 0.0;
  for (std::size_t i = 0; i < grid.cell_count(); ++i) {
    const Vector z = l.triangularView<Eigen::Lower>().solve(grid.center(i) - mean);
    rho.values[i] = std::exp(-0.5 * z.squaredNorm());
    sum += rho.values[i];
  }
  const double scale = 1.0 / (sum * grid.cell_volume());
  for (double& v : rho.values) v *= scale;
  return rho;
}

// ---------------------------------------------------------------------------
// Time integration with snapshots
// ---------------------------------------------------------------------------

struct TransportOptions {
  Scheme scheme = Scheme::donor_cell;
  /// Courant target for the sub-steps taken when dt exceeds the stable step.
  double cfl = 0.9;
  unsigned threads = 1;
};

struct TransportSolution {
  std::vector<DensityField> snapshots;
  std::vector<MomentReport> reports;
  std::vector<double> requested_times;
  /// True where a requested time was moved to the nearest multiple of dt.
  std::vector<bool> snapped;
  /// Cumulative boundary outflow at each snapshot.
  std::vector<double> outflow;
  double dt = 0.0;
  /// Explicit sub-steps per dt (1 when dt already satisfies the CFL target).
  long substeps = 1;
  long steps = 0;
};

/// Advances rho0 by `dt` per macro step up to t_end (the last macro step ends
/// within dt of t_end) and records a density and moment report at each
/// snapshot time, snapped to the nearest macro step. A dt above the stable
/// step is split into equal sub-steps satisfying the CFL target. An empty
/// snapshot list records only the final state.
inline TransportSolution solve_transport(const DensityField& rho0, const VelocityField& field, double dt, double t_end,
                                         std::vector<double> snapshot_times, const TransportOptions& opt = {}) {
  require(dt > 0, "dt must be positive");
  require(t_end >= 0, "t_end must be nonnegative");
  const TransportOperator op(field, rho0.grid, opt.scheme, opt.threads);
  TransportSolution sol;
  sol.dt = dt;
  sol.steps = static_cast<long>(std::ceil(t_end / dt - 1e-9));
  const double stable = op.max_stable_dt(opt.cfl);
  sol.substeps = std::max<long>(1, static_cast<long>(std::ceil(dt / stable - 1e-12)));
  const double h = dt / static_cast<double>(sol.substeps);

  if (snapshot_times.empty()) snapshot_times.push_back(t_end);
  std::vector<long> at;
  for (double t : snapshot_times) {
    require(t >= 0 && t <= t_end + 1e-12, "snapshot time " + fmt17(t) + " outside [0, t_end]");
    const long k = std::min(sol.steps, static_cast<long>(std::llround(t / dt)));
    at.push_back(k);
    sol.requested_times.push_back(t);
    sol.snapped.push_back(std::abs(static_cast<double>(k) * dt - t) > 1e-9 * std::max(1.0, t));
  }

  sol.snapshots.resize(at.size());
  sol.reports.resize(at.size());
  sol.outflow.resize(at.size());
  DensityField rho = rho0;
  double outflow = 0.0;
  auto record = [&](long step) {
    for (std::size_t j = 0; j < at.size(); ++j) {
      if (at[j] != step) continue;
      sol.snapshots[j] = rho;
      sol.snapshots[j].time = rho0.time + static_cast<double>(step) * dt;
      sol.reports[j] = moment_report(sol.snapshots[j], field);
      sol.outflow[j] = outflow;
    }
  };
  record(0);
  for (long s = 1; s <= sol.steps; ++s) {
    for (long sub = 0; sub < sol.substeps; ++sub) {
      StepResult r = op.step(rho, h);
      outflow += r.outflow;
      rho = std::move(r.density);
    }
    record(s);
  }
  return sol;
}

// ---------------------------------------------------------------------------
// Text formats
// ---------------------------------------------------------------------------

/// Header lines p, lower, dx, cells, time, then one value per line in
/// row-major order.
inline std::string density_to_text(const DensityField& rho) {
  const GridSpec& g = rho.grid;
  std::string out = "p=" + std::to_string(g.dim()) + "\nlower=" + join17(g.lower()) + "\ndx=" + join17(g.dx()) +
                    "\ncells=";
  for (int k = 0; k < g.dim(); ++k) out += (k ? "," : "") + std::to_string(g.cells()[k]);
  out += "\ntime=" + fmt17(rho.time) + "\n";
  for (double v : rho.values) out += fmt17(v) + "\n";
  return out;
}

inline DensityField density_from_text(const std::string& text) {
  std::stringstream in(text);
  std::string line;
  auto field = [&](const char* key) {
    if (!std::getline(in, line) || line.rfind(std::string(key) + "=", 0) != 0)
      throw IoError(std::string("density snapshot lacks header '") + key + "'");
    return line.substr(std::string(key).size() + 1);
  };
  auto number = [](const std::string& s) {
    const auto v = parse_real(s);
    if (!v) throw IoError("malformed number '" + s + "' in density snapshot");
    return *v;
  };
  auto numbers = [&](const std::string& s) {
    std::vector<double> v;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) v.push_back(number(tok));
    return v;
  };
  try {
    const int p = static_cast<int>(number(field("p")));
    const auto lower = numbers(field("lower"));
    const auto dx = numbers(field("dx"));
    std::vector<std::size_t> cells;
    for (double c : numbers(field("cells"))) cells.push_back(static_cast<std::size_t>(c));
    const double time = number(field("time"));
    if (static_cast<int>(lower.size()) != p) throw IoError("density snapshot header has inconsistent p");
    GridSpec g(lower, dx, cells);
    std::vector<double> values;
    values.reserve(g.cell_count());
    while (std::getline(in, line))
      if (!line.empty()) values.push_back(number(line));
    if (values.size() != g.cell_count()) throw IoError("density snapshot value count does not match header");
    return DensityField(std::move(g), std::move(values), time);
  } catch (const InvalidArgument& e) {
    throw IoError(std::string("invalid grid in density snapshot: ") + e.what());
  }
}

/// 2-D section over axes (a, b) with every other axis fixed at `fixed[k]`.
/// Rows: "i,j,x_a,x_b,density".
inline std::string section_csv(const DensityField& rho, int a, int b, const std::vector<std::size_t>& fixed) {
  const GridSpec& g = rho.grid;
  require(a != b && a >= 0 && b >= 0 && a < g.dim() && b < g.dim(), "invalid section axes");
  require(static_cast<int>(fixed.size()) == g.dim(), "section needs one fixed index per axis");
  std::string out = "i,j,x" + std::to_string(a + 1) + ",x" + std::to_string(b + 1) + ",density\n";
  std::size_t base = 0;
  for (int k = 0; k < g.dim(); ++k)
    if (k != a && k != b) base += fixed[k] * g.stride(k);
  for (std::size_t i = 0; i < g.cells()[a]; ++i)
    for (std::size_t j = 0; j < g.cells()[b]; ++j) {
      const std::size_t flat = base + i * g.stride(a) + j * g.stride(b);
      out += std::to_string(i) + "," + std::to_string(j) + "," + fmt17(g.center(a, i)) + "," + fmt17(g.center(b, j)) +
             "," + fmt17(rho.values[flat]) + "\n";
    }
  return out;
}

/// Cell index nearest `x` on each axis, clamped to the grid.
inline std::vector<std::size_t> nearest_cell(const GridSpec& g, const Vector& x) {
  std::vector<std::size_t> idx(g.dim());
  for (int k = 0; k < g.dim(); ++k) {
    const double s = std::floor((x[k] - g.lower()[k]) / g.dx()[k]);
    idx[k] = static_cast<std::size_t>(std::clamp(s, 0.0, static_cast<double>(g.cells()[k] - 1)));
  }
  return idx;
}

inline std::string moments_csv_header(int p) {
  std::string h = "t,mass";
  for (int k = 0; k < p; ++k) h += ",mean" + std::to_string(k + 1);
  for (int a = 0; a < p; ++a)
    for (int b = 0; b < p; ++b) h += ",cov" + std::to_string(a + 1) + std::to_string(b + 1);
  return h + ",momenta,outflow\n";
}

inline std::string moments_csv_row(const MomentReport& r, double outflow) {
  std::string row = fmt17(r.time) + "," + fmt17(r.mass) + "," + join17(r.mean);
  for (Eigen::Index a = 0; a < r.covariance.rows(); ++a)
    for (Eigen::Index b = 0; b < r.covariance.cols(); ++b) row += "," + fmt17(r.covariance(a, b));
  return row + "," + fmt17(r.momenta) + "," + fmt17(outflow) + "\n";
}

}  // namespace newtonflow
