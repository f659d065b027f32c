#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace newtonflow {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

inline constexpr const char* kVersion = "1.0.0";

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Root of every error raised by the library. `kind()` is a short stable
/// token used by the CLI to classify failures.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  virtual const char* kind() const noexcept { return "numerical"; }
};

inline std::string format_point(const Vector& x) {
  std::ostringstream os;
  os.precision(17);
  os << '(';
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    if (i) os << ", ";
    os << x[i];
  }
  os << ')';
  return os.str();
}

class SingularJacobian : public Error {
 public:
  SingularJacobian(Vector x, double condition)
      : Error("singular or ill-conditioned Jacobian at " + format_point(x) +
              " (condition estimate " + std::to_string(condition) + ")"),
        x_(std::move(x)),
        condition_(condition) {}
  const Vector& point() const { return x_; }
  double condition() const { return condition_; }

 private:
  Vector x_;
  double condition_;
};

class IndefiniteInformation : public Error {
 public:
  IndefiniteInformation(Vector x, int minor)
      : Error("information matrix not positive definite at " + format_point(x) +
              " (leading minor " + std::to_string(minor) + ")"),
        x_(std::move(x)),
        minor_(minor) {}
  const Vector& point() const { return x_; }
  /// 1-based order of the first leading principal minor that fails.
  int minor_index() const { return minor_; }

 private:
  Vector x_;
  int minor_;
};

class NonFiniteEvaluation : public Error {
 public:
  explicit NonFiniteEvaluation(const Vector& x)
      : Error("non-finite evaluation at " + format_point(x)), x_(x) {}
  const Vector& point() const { return x_; }

 private:
  Vector x_;
};

class NonConvergence : public Error {
 public:
  NonConvergence(const std::string& why, Vector last, int iterations)
      : Error(why), last_(std::move(last)), iterations_(iterations) {}
  const Vector& last_iterate() const { return last_; }
  int iterations() const { return iterations_; }

 private:
  Vector last_;
  int iterations_;
};

/// Raised (nested) when the velocity field fails during time integration.
class IntegrationError : public Error {
 public:
  IntegrationError(double t, const std::string& cause)
      : Error("field evaluation failed at t=" + std::to_string(t) + ": " + cause), t_(t) {}
  double time() const { return t_; }

 private:
  double t_;
};

class StabilityError : public Error {
 public:
  StabilityError(double dt, double limit)
      : Error("time step " + std::to_string(dt) + " exceeds stability limit " +
              std::to_string(limit)),
        dt_(dt),
        limit_(limit) {}
  double dt() const { return dt_; }
  double limit() const { return limit_; }

 private:
  double dt_;
  double limit_;
};

class SchemeError : public Error {
 public:
  using Error::Error;
};

class GridTooSmall : public Error {
 public:
  GridTooSmall(const std::string& why, std::vector<double> lower, std::vector<double> upper)
      : Error(why), lower_(std::move(lower)), upper_(std::move(upper)) {}
  const std::vector<double>& suggested_lower() const { return lower_; }
  const std::vector<double>& suggested_upper() const { return upper_; }

 private:
  std::vector<double> lower_;
  std::vector<double> upper_;
};

/// Contract violations on inputs (shapes, ranges, mismatched grids).
class InvalidArgument : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "invalid-argument"; }
};

class GridMismatch : public InvalidArgument {
 public:
  GridMismatch() : InvalidArgument("density fields live on different grids") {}
};

class IoError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "io"; }
};

inline void require(bool ok, const std::string& what) {
  if (!ok) throw InvalidArgument(what);
}

inline bool all_finite(const Vector& v) { return v.allFinite(); }

// ---------------------------------------------------------------------------
// Deterministic seeding and threading
// ---------------------------------------------------------------------------

/// SplitMix64 finalizer. Derived stream i of a run seeded with s uses
/// `derive_seed(s, i) = splitmix64(s + i)`.
inline std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  return splitmix64(seed + index);
}

/// Worker count: explicit request, else NEWTONFLOW_THREADS, else 1.
inline unsigned resolve_threads(unsigned requested = 0) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("NEWTONFLOW_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n > 0) return static_cast<unsigned>(n);
  }
  return 1;
}

/// Static block partition of [0, n). Each index is visited exactly once and
/// the body must only write to index-owned storage, so results do not depend
/// on the worker count.
template <class Body>
void parallel_for(std::size_t n, unsigned threads, Body&& body) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  const std::size_t chunk = (n + threads - 1) / threads;
  for (unsigned w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      const std::size_t begin = w * chunk;
      const std::size_t end = std::min(n, begin + chunk);
      try {
        for (std::size_t i = begin; i < end; ++i) body(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Text output helpers
// ---------------------------------------------------------------------------

/// 17 significant digits, enough to round-trip any double.
inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Whole-token decimal parse; surrounding blanks are ignored. Unlike stod,
/// subnormal values are accepted.
inline std::optional<double> parse_real(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return std::nullopt;
  s = s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  if (s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::string join17(const Vector& v, char sep = ',') {
  std::string out;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (i) out += sep;
    out += fmt17(v[i]);
  }
  return out;
}

inline std::string join17(const std::vector<double>& v, char sep = ',') {
  return join17(Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size())), sep);
}

}  // namespace newtonflow
