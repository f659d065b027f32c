#pragma once

#include "newtonflow/core.hpp"
#include "newtonflow/fields.hpp"
#include "newtonflow/grid.hpp"

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

namespace newtonflow {

enum class Method { euler, rk4 };

inline Method parse_method(const std::string& s) {
  if (s == "euler") return Method::euler;
  if (s == "rk4") return Method::rk4;
  throw InvalidArgument("unknown integration method '" + s + "'");
}

inline const char* to_string(Method m) { return m == Method::euler ? "euler" : "rk4"; }

struct Trajectory {
  std::vector<double> times;
  std::vector<Vector> states;
  /// Set when the state left the working domain; the trajectory ends at the
  /// last inside state.
  std::optional<double> escape_time;

  const Vector& final_state() const { return states.back(); }
  double final_time() const { return times.back(); }
};

namespace detail {

inline Vector step(const VelocityField& v, const Vector& x, double dt, Method m) {
  if (m == Method::euler) return x + dt * v(x);
  const Vector k1 = v(x);
  const Vector k2 = v(x + 0.5 * dt * k1);
  const Vector k3 = v(x + 0.5 * dt * k2);
  const Vector k4 = v(x + dt * k3);
  return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

/// Number of fixed steps of size dt so that the last time lands within dt of
/// t_end; exact multiples are not overshot.
inline long step_count(double dt, double t_end) {
  return static_cast<long>(std::ceil(t_end / dt - 1e-9));
}

}  // namespace detail

/// Fixed-step integration of dx/dt = v(x). Field failures are rethrown nested
/// inside an IntegrationError carrying the failure time.
inline Trajectory integrate(const VelocityField& field, const Vector& x0, double dt, double t_end,
                            Method method = Method::rk4, const std::optional<WorkingDomain>& domain = std::nullopt) {
  require(dt > 0, "dt must be positive");
  require(t_end >= 0, "t_end must be nonnegative");
  require(x0.size() == field.dim(), "initial state dimension does not match the field");
  const long steps = detail::step_count(dt, t_end);
  Trajectory tr;
  tr.times.reserve(steps + 1);
  tr.states.reserve(steps + 1);
  tr.times.push_back(0.0);
  tr.states.push_back(x0);
  Vector x = x0;
  for (long s = 1; s <= steps; ++s) {
    const double t = static_cast<double>(s - 1) * dt;
    try {
      x = detail::step(field, x, dt, method);
    } catch (const Error& e) {
      std::throw_with_nested(IntegrationError(t, e.what()));
    }
    if (!x.allFinite()) std::throw_with_nested(IntegrationError(t, "state became non-finite"));
    if (domain && !domain->contains(x)) {
      tr.escape_time = static_cast<double>(s) * dt;
      break;
    }
    tr.times.push_back(static_cast<double>(s) * dt);
    tr.states.push_back(x);
  }
  return tr;
}

struct ParticleEnsemble {
  std::vector<Vector> positions;
  double time = 0.0;
  std::uint64_t seed = 0;

  std::size_t size() const { return positions.size(); }
  int dim() const { return positions.empty() ? 0 : static_cast<int>(positions.front().size()); }

  Vector mean() const {
    Vector m = Vector::Zero(dim());
    for (const auto& x : positions) m += x;
    return m / static_cast<double>(positions.size());
  }
};

struct GaussianLaw {
  Vector mean;
  Matrix cov;
};
struct UniformLaw {};
using InitialLaw = std::variant<GaussianLaw, UniformLaw>;

/// i.i.d. draws inside `domain`. Gaussian draws falling outside are redrawn,
/// so the sample follows the Gaussian truncated to the box.
inline ParticleEnsemble sample_initial(const WorkingDomain& domain, const InitialLaw& law, std::size_t count,
                                       std::uint64_t seed) {
  require(count >= 1, "ensemble needs at least one particle");
  const int p = domain.dim();
  std::mt19937_64 rng(seed);
  ParticleEnsemble e;
  e.seed = seed;
  e.positions.reserve(count);
  if (const auto* g = std::get_if<GaussianLaw>(&law)) {
    require(g->mean.size() == p && g->cov.rows() == p && g->cov.cols() == p, "Gaussian law dimension mismatch");
    Eigen::LLT<Matrix> llt(g->cov);
    if (llt.info() != Eigen::Success) throw IndefiniteInformation(g->mean, detail::failing_leading_minor(g->cov));
    const Matrix l = llt.matrixL();
    std::normal_distribution<double> normal(0.0, 1.0);
    Vector z(p);
    std::size_t rejected = 0;
    while (e.positions.size() < count) {
      for (int k = 0; k < p; ++k) z[k] = normal(rng);
      Vector x = g->mean + l * z;
      if (domain.contains(x)) {
        e.positions.push_back(std::move(x));
      } else if (++rejected > 100 * count + 1000) {
        throw InvalidArgument("Gaussian law has too little mass inside the sampling domain");
      }
    }
  } else {
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (std::size_t i = 0; i < count; ++i) {
      Vector x(p);
      for (int k = 0; k < p; ++k) x[k] = domain.lower[k] + unif(rng) * (domain.upper[k] - domain.lower[k]);
      e.positions.push_back(std::move(x));
    }
  }
  return e;
}

struct AdvanceResult {
  ParticleEnsemble ensemble;
  std::size_t escaped = 0;
};

/// Advances every particle independently by `t_end` and drops those leaving
/// `domain`. Survivors keep their relative order, so the result is the same
/// for any thread count.
inline AdvanceResult advance_ensemble(const ParticleEnsemble& e, const VelocityField& field, double dt, double t_end,
                                      Method method, const WorkingDomain& domain, unsigned threads = 1) {
  std::vector<Vector> out(e.size());
  std::vector<char> alive(e.size(), 0);
  parallel_for(e.size(), threads, [&](std::size_t i) {
    const Trajectory tr = integrate(field, e.positions[i], dt, t_end, method, domain);
    if (!tr.escape_time) {
      out[i] = tr.final_state();
      alive[i] = 1;
    }
  });
  AdvanceResult r;
  r.ensemble.time = e.time + static_cast<double>(detail::step_count(dt, t_end)) * dt;
  r.ensemble.seed = e.seed;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (alive[i])
      r.ensemble.positions.push_back(std::move(out[i]));
    else
      ++r.escaped;
  }
  return r;
}

struct Histogram {};
struct GaussianKernel {
  /// Kernel standard deviation; <= 0 selects one cell width on each axis.
  double bandwidth = 0.0;
};
using Smoothing = std::variant<Histogram, GaussianKernel>;

/// Normalized density of the ensemble on `grid`: every particle carries mass
/// 1/N. The kernel variant spreads each particle over cells within four
/// bandwidths and renormalizes per particle so no mass is lost at the edges.
inline DensityField empirical_density(const ParticleEnsemble& e, const GridSpec& grid,
                                      const Smoothing& smoothing = Histogram{}) {
  if (e.positions.empty()) throw InvalidArgument("empirical density of an empty ensemble");
  require(e.dim() == grid.dim(), "ensemble and grid dimensions differ");
  DensityField rho(grid, e.time);
  const double w = 1.0 / static_cast<double>(e.size());
  std::vector<double> mass(grid.cell_count(), 0.0);

  if (std::holds_alternative<Histogram>(smoothing)) {
    for (const auto& x : e.positions) {
      const auto cell = grid.locate(x);
      if (!cell) throw InvalidArgument("particle " + format_point(x) + " lies outside the grid");
      mass[*cell] += w;
    }
  } else {
    const int p = grid.dim();
    const double bw = std::get<GaussianKernel>(smoothing).bandwidth;
    std::vector<double> h(p);
    for (int k = 0; k < p; ++k) h[k] = bw > 0 ? bw : grid.dx()[k];
    std::vector<std::vector<double>> weights(p);
    std::vector<std::size_t> first(p);
    for (const auto& x : e.positions) {
      if (!grid.locate(x)) throw InvalidArgument("particle " + format_point(x) + " lies outside the grid");
      for (int k = 0; k < p; ++k) {
        const double lo = (x[k] - 4.0 * h[k] - grid.lower()[k]) / grid.dx()[k];
        const double hi = (x[k] + 4.0 * h[k] - grid.lower()[k]) / grid.dx()[k];
        const auto i0 = static_cast<std::size_t>(std::max(0.0, std::floor(lo)));
        const auto i1 = std::min(grid.cells()[k] - 1, static_cast<std::size_t>(std::max(0.0, std::floor(hi))));
        first[k] = i0;
        weights[k].clear();
        double sum = 0.0;
        for (std::size_t i = i0; i <= i1; ++i) {
          const double z = (grid.center(k, i) - x[k]) / h[k];
          weights[k].push_back(std::exp(-0.5 * z * z));
          sum += weights[k].back();
        }
        for (double& v : weights[k]) v /= sum;
      }
      // Tensor-product spread over the per-axis windows.
      std::vector<std::size_t> off(p, 0);
      while (true) {
        double wt = w;
        std::size_t flat = 0;
        for (int k = 0; k < p; ++k) {
          wt *= weights[k][off[k]];
          flat += (first[k] + off[k]) * grid.stride(k);
        }
        mass[flat] += wt;
        int k = p - 1;
        while (k >= 0 && ++off[k] == weights[k].size()) off[k--] = 0;
        if (k < 0) break;
      }
    }
  }
  const double vol = grid.cell_volume();
  for (std::size_t i = 0; i < mass.size(); ++i) rho.values[i] = mass[i] / vol;
  return rho;
}

/// CSV snapshot, one row per particle: "t,x1,...,xp".
inline std::string ensemble_csv(const ParticleEnsemble& e) {
  std::string out = "t";
  for (int k = 0; k < e.dim(); ++k) out += ",x" + std::to_string(k + 1);
  out += '\n';
  const std::string t = fmt17(e.time);
  for (const auto& x : e.positions) out += t + "," + join17(x) + "\n";
  return out;
}

}  // namespace newtonflow
