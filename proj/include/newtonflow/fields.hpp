#pragma once

#include "newtonflow/core.hpp"
#include "newtonflow/grid.hpp"

#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace newtonflow {

using VectorMap = std::function<Vector(const Vector&)>;
using MatrixMap = std::function<Matrix(const Vector&)>;

inline constexpr double kMaxJacobianCondition = 1e12;

/// Per-axis default central-difference step: 1e-6 * max(1, |x_k|).
inline Vector default_fd_steps(const Vector& x) {
  return (x.array().abs().max(1.0) * 1e-6).matrix();
}

/// Central-difference Jacobian with per-axis steps h[k].
inline Matrix numeric_jacobian(const VectorMap& f, const Vector& x, const Vector& h) {
  require(h.size() == x.size(), "step vector must match point dimension");
  Matrix jac;
  Vector xp = x, xm = x;
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    require(h[k] > 0, "finite-difference step must be positive");
    xp[k] = x[k] + h[k];
    xm[k] = x[k] - h[k];
    const Vector fp = f(xp);
    const Vector fm = f(xm);
    if (!fp.allFinite()) throw NonFiniteEvaluation(xp);
    if (!fm.allFinite()) throw NonFiniteEvaluation(xm);
    if (k == 0) jac.resize(fp.size(), x.size());
    jac.col(k) = (fp - fm) / (2.0 * h[k]);
    xp[k] = x[k];
    xm[k] = x[k];
  }
  return jac;
}

inline Matrix numeric_jacobian(const VectorMap& f, const Vector& x, double h) {
  return numeric_jacobian(f, x, Vector::Constant(x.size(), h));
}

inline Matrix numeric_jacobian(const VectorMap& f, const Vector& x) {
  return numeric_jacobian(f, x, default_fd_steps(x));
}

/// Gradient of a scalar function by central differences (one row of the
/// Jacobian, returned as a column vector).
inline Vector numeric_gradient(const std::function<double(const Vector&)>& f, const Vector& x,
                               const Vector& h) {
  const VectorMap wrapped = [&f](const Vector& y) { return Vector::Constant(1, f(y)); };
  return numeric_jacobian(wrapped, x, h).row(0).transpose();
}

/// A velocity field x -> v(x) on R^p. Evaluation is const and reentrant; the
/// wrapped callables must not carry shared mutable state.
class VelocityField {
 public:
  VelocityField() = default;
  VelocityField(int dim, VectorMap eval, std::optional<MatrixMap> jacobian = std::nullopt,
                std::string label = "custom")
      : dim_(dim), eval_(std::move(eval)), jac_(std::move(jacobian)), label_(std::move(label)) {
    require(dim_ >= 1, "velocity field dimension must be positive");
  }

  int dim() const { return dim_; }
  const std::string& label() const { return label_; }
  bool has_analytic_jacobian() const { return jac_.has_value(); }

  Vector operator()(const Vector& x) const {
    require(x.size() == dim_, "point dimension does not match field dimension");
    Vector v = eval_(x);
    if (v.size() != dim_) throw InvalidArgument("field '" + label_ + "' returned wrong dimension");
    if (!v.allFinite()) throw NonFiniteEvaluation(x);
    return v;
  }

  /// Analytic Jacobian if supplied, else central differences.
  Matrix jacobian(const Vector& x) const {
    if (jac_) return (*jac_)(x);
    return numeric_jacobian([this](const Vector& y) { return (*this)(y); }, x);
  }

  VectorMap as_map() const {
    return [self = *this](const Vector& y) { return self(y); };
  }

 private:
  int dim_ = 0;
  VectorMap eval_;
  std::optional<MatrixMap> jac_;
  std::string label_;
};

namespace detail {

inline Vector solve_lu(const Matrix& jac, const Vector& rhs, const Vector& x) {
  Eigen::PartialPivLU<Matrix> lu(jac);
  const double rcond = lu.rcond();
  if (!(rcond > 1.0 / kMaxJacobianCondition))
    throw SingularJacobian(x, rcond > 0 ? 1.0 / rcond : std::numeric_limits<double>::infinity());
  return lu.solve(rhs);
}

/// Smallest k such that the leading k x k block is not positive definite.
inline int failing_leading_minor(const Matrix& m) {
  for (Eigen::Index k = 1; k <= m.rows(); ++k) {
    Eigen::LLT<Matrix> llt(m.topLeftCorner(k, k));
    if (llt.info() != Eigen::Success) return static_cast<int>(k);
  }
  return static_cast<int>(m.rows());
}

}  // namespace detail

/// Solve I(x) y = s by Cholesky; IndefiniteInformation when I(x) is not SPD.
inline Vector solve_spd(const Matrix& info, const Vector& rhs, const Vector& x) {
  Eigen::LLT<Matrix> llt(info);
  if (llt.info() != Eigen::Success || !info.allFinite())
    throw IndefiniteInformation(x, detail::failing_leading_minor(info));
  // LLT only reads the lower triangle; a tiny or negative pivot can slip
  // through as a finite factor.
  const Matrix& l = llt.matrixLLT();
  for (Eigen::Index k = 0; k < l.rows(); ++k)
    if (!(l(k, k) > 0)) throw IndefiniteInformation(x, static_cast<int>(k + 1));
  return llt.solve(rhs);
}

/// Newton flow v(x) = -J(x)^{-1} F(x). Without an analytic J the Jacobian of
/// F is taken by central differences. Each evaluation factorizes J (LU) and
/// rejects condition estimates above 1e12.
inline VelocityField make_newton_field(VectorMap residual, std::optional<MatrixMap> jacobian, int dim,
                                       std::string label = "newton") {
  auto jac = jacobian ? std::move(*jacobian) : MatrixMap([residual](const Vector& x) {
    return numeric_jacobian(residual, x);
  });
  auto eval = [residual, jac](const Vector& x) -> Vector {
    const Vector f = residual(x);
    if (!f.allFinite()) throw NonFiniteEvaluation(x);
    const Matrix j = jac(x);
    if (!j.allFinite()) throw NonFiniteEvaluation(x);
    return -detail::solve_lu(j, f, x);
  };
  return VelocityField(dim, std::move(eval), std::nullopt, std::move(label));
}

/// Fisher-scoring flow v(x) = I(x)^{-1} S(x) by Cholesky solve.
inline VelocityField make_fisher_field(VectorMap score, MatrixMap information, int dim,
                                       std::string label = "fisher") {
  auto eval = [score = std::move(score), information = std::move(information)](const Vector& x) -> Vector {
    const Vector s = score(x);
    if (!s.allFinite()) throw NonFiniteEvaluation(x);
    return solve_spd(information(x), s, x);
  };
  return VelocityField(dim, std::move(eval), std::nullopt, std::move(label));
}

/// Plain score ascent v(x) = S(x). The Jacobian, when known, is forwarded.
inline VelocityField make_gradient_field(VectorMap score, int dim, std::optional<MatrixMap> jacobian = std::nullopt) {
  return VelocityField(dim, std::move(score), std::move(jacobian), "gradient-flow");
}

/// Divergence of `field` sampled at cell centres: central differences in the
/// interior, one-sided on boundary cells. Diagnostic only; the transport
/// solver works from face fluxes instead.
inline std::vector<double> sampled_divergence(const VelocityField& field, const GridSpec& grid) {
  require(field.dim() == grid.dim(), "field and grid dimensions differ");
  const std::size_t n = grid.cell_count();
  const int p = grid.dim();
  std::vector<Vector> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = field(grid.center(i));

  std::vector<double> div(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto idx = grid.unravel(i);
    for (int k = 0; k < p; ++k) {
      const std::size_t s = grid.stride(k);
      const std::size_t m = grid.cells()[k];
      const double h = grid.dx()[k];
      double d;
      if (idx[k] == 0)
        d = (v[i + s][k] - v[i][k]) / h;
      else if (idx[k] == m - 1)
        d = (v[i][k] - v[i - s][k]) / h;
      else
        d = (v[i + s][k] - v[i - s][k]) / (2.0 * h);
      div[i] += d;
    }
  }
  return div;
}

}  // namespace newtonflow
