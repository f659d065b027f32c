#pragma once

#include "newtonflow/core.hpp"

#include <array>
#include <cmath>
#include <optional>
#include <vector>

namespace newtonflow {

/// Axis-aligned box, lower < upper on every axis.
struct WorkingDomain {
  Vector lower;
  Vector upper;

  WorkingDomain() = default;
  WorkingDomain(Vector lo, Vector hi) : lower(std::move(lo)), upper(std::move(hi)) {
    require(lower.size() == upper.size() && lower.size() > 0, "domain bounds must share a positive dimension");
    for (Eigen::Index k = 0; k < lower.size(); ++k)
      require(upper[k] > lower[k], "domain upper bound must exceed lower bound on axis " + std::to_string(k));
  }

  int dim() const { return static_cast<int>(lower.size()); }

  /// Half-open containment [lower, upper).
  bool contains(const Vector& x) const {
    for (Eigen::Index k = 0; k < lower.size(); ++k)
      if (!(x[k] >= lower[k] && x[k] < upper[k])) return false;
    return true;
  }
};

inline constexpr std::size_t kMaxDimension = 4;
inline constexpr std::size_t kDefaultCellBudget = 20'000'000;

/// Regular rectangular lattice. Cells are stored row-major: the last axis
/// varies fastest.
class GridSpec {
 public:
  GridSpec() = default;
  GridSpec(std::vector<double> lower, std::vector<double> dx, std::vector<std::size_t> cells,
           std::size_t budget = kDefaultCellBudget)
      : lower_(std::move(lower)), dx_(std::move(dx)), cells_(std::move(cells)) {
    const std::size_t p = lower_.size();
    require(p >= 1 && p <= kMaxDimension, "grid dimension must be in [1, 4]");
    require(dx_.size() == p && cells_.size() == p, "grid lower/dx/cells must have equal length");
    total_ = 1;
    for (std::size_t k = 0; k < p; ++k) {
      require(dx_[k] > 0 && std::isfinite(dx_[k]), "grid dx must be positive on axis " + std::to_string(k));
      require(cells_[k] >= 3, "grid needs at least 3 cells on axis " + std::to_string(k));
      require(std::isfinite(lower_[k]), "grid lower bound must be finite");
      total_ *= cells_[k];
      require(total_ <= budget, "grid cell count exceeds budget of " + std::to_string(budget));
    }
    strides_.assign(p, 1);
    for (std::size_t k = p - 1; k-- > 0;) strides_[k] = strides_[k + 1] * cells_[k + 1];
  }

  /// Uniform grid covering [lower, upper] on each axis with the given cell count.
  static GridSpec covering(const Vector& lower, const Vector& upper, std::size_t cells_per_axis) {
    std::vector<double> lo(lower.size()), dx(lower.size());
    for (Eigen::Index k = 0; k < lower.size(); ++k) {
      lo[k] = lower[k];
      dx[k] = (upper[k] - lower[k]) / static_cast<double>(cells_per_axis);
    }
    return GridSpec(lo, dx, std::vector<std::size_t>(lower.size(), cells_per_axis));
  }

  int dim() const { return static_cast<int>(lower_.size()); }
  const std::vector<double>& lower() const { return lower_; }
  const std::vector<double>& dx() const { return dx_; }
  const std::vector<std::size_t>& cells() const { return cells_; }
  std::size_t stride(int axis) const { return strides_[axis]; }
  std::size_t cell_count() const { return total_; }

  double upper(int axis) const { return lower_[axis] + dx_[axis] * static_cast<double>(cells_[axis]); }

  double cell_volume() const {
    double v = 1.0;
    for (double d : dx_) v *= d;
    return v;
  }

  WorkingDomain domain() const {
    Vector lo(dim()), hi(dim());
    for (int k = 0; k < dim(); ++k) {
      lo[k] = lower_[k];
      hi[k] = upper(k);
    }
    return {lo, hi};
  }

  std::array<std::size_t, kMaxDimension> unravel(std::size_t flat) const {
    std::array<std::size_t, kMaxDimension> idx{};
    for (int k = 0; k < dim(); ++k) {
      idx[k] = flat / strides_[k];
      flat %= strides_[k];
    }
    return idx;
  }

  double center(int axis, std::size_t i) const { return lower_[axis] + (static_cast<double>(i) + 0.5) * dx_[axis]; }

  Vector center(std::size_t flat) const {
    const auto idx = unravel(flat);
    Vector x(dim());
    for (int k = 0; k < dim(); ++k) x[k] = center(k, idx[k]);
    return x;
  }

  /// Flat index of the cell containing x, or nullopt outside the grid.
  std::optional<std::size_t> locate(const Vector& x) const {
    std::size_t flat = 0;
    for (int k = 0; k < dim(); ++k) {
      const double s = (x[k] - lower_[k]) / dx_[k];
      if (!(s >= 0.0) || s >= static_cast<double>(cells_[k])) return std::nullopt;
      const auto i = std::min(static_cast<std::size_t>(s), cells_[k] - 1);
      flat += i * strides_[k];
    }
    return flat;
  }

  bool operator==(const GridSpec& o) const {
    return lower_ == o.lower_ && dx_ == o.dx_ && cells_ == o.cells_;
  }

 private:
  std::vector<double> lower_;
  std::vector<double> dx_;
  std::vector<std::size_t> cells_;
  std::vector<std::size_t> strides_;
  std::size_t total_ = 0;
};

/// Cell-averaged density (mass per unit volume) over a grid at a time stamp.
struct DensityField {
  GridSpec grid;
  std::vector<double> values;
  double time = 0.0;

  DensityField() = default;
  DensityField(GridSpec g, double t = 0.0) : grid(std::move(g)), values(grid.cell_count(), 0.0), time(t) {}
  DensityField(GridSpec g, std::vector<double> v, double t) : grid(std::move(g)), values(std::move(v)), time(t) {
    require(values.size() == grid.cell_count(), "density value count does not match grid");
  }

  double mass() const {
    double s = 0.0;
    for (double v : values) s += v;
    return s * grid.cell_volume();
  }

  double cell_mass(std::size_t i) const { return values[i] * grid.cell_volume(); }
};

}  // namespace newtonflow
