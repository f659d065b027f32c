#pragma once

#include "newtonflow/fields.hpp"
#include "newtonflow/glm.hpp"

#include <optional>
#include <string>
#include <vector>

namespace newtonflow {

/// v(x) = -x.
inline VelocityField linear_decay_field(int p) {
  return VelocityField(
      p, [](const Vector& x) -> Vector { return -x; },
      MatrixMap([p](const Vector&) -> Matrix { return -Matrix::Identity(p, p); }), "linear-decay");
}

/// v(x) = -x^3 componentwise.
inline VelocityField cubic_decay_field(int p) {
  return VelocityField(
      p, [](const Vector& x) -> Vector { return -x.array().cube().matrix(); },
      MatrixMap([](const Vector& x) -> Matrix { return (-3.0 * x.array().square()).matrix().asDiagonal(); }),
      "cubic-decay");
}

/// Rigid rotation (-x2, x1) in the first two axes; other components zero.
inline VelocityField rotation_field(int p) {
  require(p >= 2, "rotation needs at least two dimensions");
  return VelocityField(
      p,
      [](const Vector& x) -> Vector {
        Vector v = Vector::Zero(x.size());
        v[0] = -x[1];
        v[1] = x[0];
        return v;
      },
      MatrixMap([p](const Vector&) -> Matrix {
        Matrix j = Matrix::Zero(p, p);
        j(0, 1) = -1.0;
        j(1, 0) = 1.0;
        return j;
      }),
      "rotation");
}

inline VelocityField zero_field(int p) {
  return VelocityField(
      p, [](const Vector& x) -> Vector { return Vector::Zero(x.size()); },
      MatrixMap([p](const Vector&) -> Matrix { return Matrix::Zero(p, p); }), "zero");
}

/// Newton flow for F_k(x) = (x_k - 1/2)(x_k + 3), roots at 1/2 and -3, with
/// J = diag(2 x_k + 5/2) singular only at x_k = -5/4.
inline VelocityField newton_quadratic_field(int p) {
  VectorMap f = [](const Vector& x) -> Vector { return ((x.array() - 0.5) * (x.array() + 3.0)).matrix(); };
  MatrixMap j = [](const Vector& x) -> Matrix { return (2.0 * x.array() + 2.5).matrix().asDiagonal(); };
  return make_newton_field(f, j, p, "newton:quadratic");
}

inline const std::vector<std::string>& builtin_field_keys() {
  static const std::vector<std::string> keys{"linear-decay", "rotation",  "newton:quadratic", "glm-fisher",
                                             "glm-score",    "cubic-decay", "zero"};
  return keys;
}

inline bool field_needs_dataset(const std::string& key) { return key == "glm-fisher" || key == "glm-score"; }

/// Resolves a built-in field by key. GLM fields need `data`.
inline VelocityField make_builtin_field(const std::string& key, int p, const glm::Dataset* data = nullptr) {
  if (key == "linear-decay") return linear_decay_field(p);
  if (key == "cubic-decay") return cubic_decay_field(p);
  if (key == "rotation") return rotation_field(p);
  if (key == "zero") return zero_field(p);
  if (key == "newton:quadratic") return newton_quadratic_field(p);
  if (field_needs_dataset(key)) {
    require(data != nullptr, "field '" + key + "' needs a GLM dataset");
    require(data->p() == p, "GLM dimension does not match the requested dimension");
    return key == "glm-fisher" ? glm::fisher_field(*data) : glm::score_field(*data);
  }
  throw InvalidArgument("unknown field '" + key + "'");
}

}  // namespace newtonflow
