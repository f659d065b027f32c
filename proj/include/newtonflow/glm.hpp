#pragma once

#include "newtonflow/core.hpp"
#include "newtonflow/fields.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace newtonflow::glm {

enum class CovariateLaw { standard_normal, uniform_pm1 };

inline std::string to_string(CovariateLaw law) {
  return law == CovariateLaw::standard_normal ? "standard_normal" : "uniform[-1,1]";
}

inline CovariateLaw parse_covariate_law(const std::string& s) {
  if (s == "standard_normal" || s == "normal") return CovariateLaw::standard_normal;
  if (s == "uniform[-1,1]" || s == "uniform") return CovariateLaw::uniform_pm1;
  throw InvalidArgument("unknown covariate law '" + s + "'");
}

inline double sigmoid(double t) {
  if (t >= 0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

/// log(1 + e^t), switching to the asymptote above t = 30.
inline double softplus(double t) { return t > 30.0 ? t : std::log1p(std::exp(t)); }

/// Logistic-regression data: covariates X (n x p), binary labels y.
class Dataset {
 public:
  Dataset(Matrix x, Vector y, Vector beta_star = {}, std::uint64_t seed = 0,
          CovariateLaw law = CovariateLaw::standard_normal)
      : x_(std::move(x)), y_(std::move(y)), beta_star_(std::move(beta_star)), seed_(seed), law_(law) {
    require(x_.rows() == y_.size(), "X rows and y length differ");
    require(x_.rows() >= x_.cols() && x_.cols() >= 1, "dataset needs n >= p >= 1");
    for (Eigen::Index j = 0; j < y_.size(); ++j)
      require(y_[j] == 0.0 || y_[j] == 1.0, "responses must be 0 or 1");
    Eigen::ColPivHouseholderQR<Matrix> qr(x_);
    require(qr.rank() == x_.cols(), "design matrix is rank deficient");
    if (beta_star_.size() == 0) beta_star_ = Vector::Zero(x_.cols());
    require(beta_star_.size() == x_.cols(), "beta_star length must equal p");
  }

  const Matrix& x() const { return x_; }
  const Vector& y() const { return y_; }
  const Vector& beta_star() const { return beta_star_; }
  std::uint64_t seed() const { return seed_; }
  CovariateLaw law() const { return law_; }
  Eigen::Index n() const { return x_.rows(); }
  Eigen::Index p() const { return x_.cols(); }

 private:
  Matrix x_;
  Vector y_;
  Vector beta_star_;
  std::uint64_t seed_;
  CovariateLaw law_;
};

/// Draws y_j ~ Bernoulli(sigmoid(x_j' beta)) for a fixed design.
inline Vector simulate_responses(const Matrix& x, const Vector& beta, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Vector y(x.rows());
  for (Eigen::Index j = 0; j < x.rows(); ++j) y[j] = unif(rng) < sigmoid(x.row(j).dot(beta)) ? 1.0 : 0.0;
  return y;
}

inline Matrix simulate_covariates(Eigen::Index n, Eigen::Index p, CovariateLaw law, std::mt19937_64& rng) {
  Matrix x(n, p);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index k = 0; k < p; ++k) x(j, k) = law == CovariateLaw::standard_normal ? normal(rng) : unif(rng);
  return x;
}

/// Covariates are drawn row by row, then responses, from one mt19937_64
/// stream seeded with `seed`.
inline Dataset simulate(Eigen::Index n, const Vector& beta_star, std::uint64_t seed,
                        CovariateLaw law = CovariateLaw::standard_normal) {
  require(n >= 1, "sample size must be positive");
  std::mt19937_64 rng(seed);
  Matrix x = simulate_covariates(n, beta_star.size(), law, rng);
  Vector y = simulate_responses(x, beta_star, rng);
  return Dataset(std::move(x), std::move(y), beta_star, seed, law);
}

inline double loglik(const Dataset& d, const Vector& beta) {
  const Vector eta = d.x() * beta;
  double l = 0.0;
  for (Eigen::Index j = 0; j < eta.size(); ++j) l += d.y()[j] * eta[j] - softplus(eta[j]);
  return l;
}

inline Vector fitted(const Dataset& d, const Vector& beta) {
  return (d.x() * beta).unaryExpr([](double t) { return sigmoid(t); });
}

inline Vector score(const Dataset& d, const Vector& beta) {
  return d.x().transpose() * (d.y() - fitted(d, beta));
}

inline Matrix fisher(const Dataset& d, const Vector& beta) {
  const Vector mu = fitted(d, beta);
  const Vector w = (mu.array() * (1.0 - mu.array())).matrix();
  Matrix info = d.x().transpose() * w.asDiagonal() * d.x();
  return 0.5 * (info + info.transpose());
}

struct MleResult {
  Vector beta_hat;
  int iterations = 0;
  double final_score_norm = 0.0;
};

inline constexpr double kDivergenceNorm = 1e3;

/// Discrete Fisher scoring beta <- beta + I(beta)^{-1} S(beta) until
/// ||S||_inf <= tol. Throws NonConvergence after max_iter iterations, when
/// ||beta|| exceeds 1e3, or when every fitted probability matches its label
/// to 1e-8 (separated data: the MLE is at infinity).
inline MleResult fisher_scoring_solve(const Dataset& d, const Vector& beta0, double tol = 1e-10, int max_iter = 100) {
  require(tol > 0, "tolerance must be positive");
  require(beta0.size() == d.p(), "start vector length must equal p");
  Vector beta = beta0;
  for (int it = 0;; ++it) {
    const Vector s = score(d, beta);
    const double norm = s.lpNorm<Eigen::Infinity>();
    if (norm <= tol) return {beta, it, norm};
    if ((d.y() - fitted(d, beta)).lpNorm<Eigen::Infinity>() < 1e-8)
      throw NonConvergence("separated data: fitted probabilities numerically 0 or 1", beta, it);
    if (it >= max_iter) throw NonConvergence("Fisher scoring did not converge", beta, it);
    beta += solve_spd(fisher(d, beta), s, beta);
    if (!(beta.norm() <= kDivergenceNorm))
      throw NonConvergence("Fisher scoring diverged (||beta|| > 1e3)", beta, it + 1);
  }
}

// ---------------------------------------------------------------------------
// Bartlett identities by Monte Carlo
// ---------------------------------------------------------------------------

struct BartlettReport {
  int replications = 0;
  Vector mean_score;
  Vector score_std_error;
  /// Average of -dS/dbeta' taken by central differences of the score.
  Matrix mean_neg_hessian;
  /// Average of the closed-form information sum_j w_j x_j x_j'.
  Matrix fisher;
  /// Average of S S', the information as the variance of the score.
  Matrix mean_score_outer;
  /// Entrywise standard error of mean(-dS/dbeta' - S S').
  Matrix identity_std_error;
  bool std_errors_defined = false;

  /// Mean of -dS/dbeta' - S S', the second identity's residual.
  Matrix identity_gap() const { return mean_neg_hessian - mean_score_outer; }

  bool first_identity_holds(double k = 3.0) const {
    if (!std_errors_defined) return false;
    return (mean_score.array().abs() <= k * score_std_error.array()).all();
  }

  bool second_identity_holds(double k = 3.0) const {
    if (!std_errors_defined) return false;
    return (identity_gap().array().abs() <= k * identity_std_error.array()).all();
  }
};

/// Replication r draws a fresh dataset seeded with derive_seed(seed, r) and
/// evaluates the score, the finite-difference negative Hessian, the
/// closed-form information and the score outer product at beta_star.
inline BartlettReport bartlett_check(const Vector& beta_star, Eigen::Index n, int replications, std::uint64_t seed,
                                     CovariateLaw law = CovariateLaw::standard_normal, unsigned threads = 1) {
  require(replications >= 1, "need at least one replication");
  const Eigen::Index p = beta_star.size();
  struct Draw {
    Vector s;
    Matrix neg_h, info, outer;
  };
  std::vector<Draw> draws(static_cast<std::size_t>(replications));
  parallel_for(draws.size(), threads, [&](std::size_t r) {
    const Dataset d = simulate(n, beta_star, derive_seed(seed, r), law);
    Draw& out = draws[r];
    out.s = score(d, beta_star);
    const VectorMap s = [&d](const Vector& b) { return score(d, b); };
    out.neg_h = -numeric_jacobian(s, beta_star, Vector::Constant(p, 1e-5));
    out.info = fisher(d, beta_star);
    out.outer = out.s * out.s.transpose();
  });

  BartlettReport rep;
  rep.replications = replications;
  rep.mean_score = Vector::Zero(p);
  rep.mean_neg_hessian = rep.fisher = rep.mean_score_outer = Matrix::Zero(p, p);
  for (const auto& d : draws) {
    rep.mean_score += d.s;
    rep.mean_neg_hessian += d.neg_h;
    rep.fisher += d.info;
    rep.mean_score_outer += d.outer;
  }
  const double m = replications;
  rep.mean_score /= m;
  rep.mean_neg_hessian /= m;
  rep.fisher /= m;
  rep.mean_score_outer /= m;

  rep.std_errors_defined = replications >= 2;
  if (!rep.std_errors_defined) {
    rep.score_std_error = Vector::Constant(p, std::numeric_limits<double>::quiet_NaN());
    rep.identity_std_error = Matrix::Constant(p, p, std::numeric_limits<double>::quiet_NaN());
    return rep;
  }
  Vector ss = Vector::Zero(p);
  Matrix gg = Matrix::Zero(p, p);
  const Matrix gap = rep.identity_gap();
  for (const auto& d : draws) {
    ss += (d.s - rep.mean_score).cwiseAbs2();
    gg += (d.neg_h - d.outer - gap).cwiseAbs2();
  }
  rep.score_std_error = (ss / (m - 1.0) / m).cwiseSqrt();
  rep.identity_std_error = (gg / (m - 1.0) / m).cwiseSqrt();
  return rep;
}

// ---------------------------------------------------------------------------
// Fields built from a dataset
// ---------------------------------------------------------------------------

inline VelocityField fisher_field(const Dataset& d) {
  auto data = std::make_shared<const Dataset>(d);
  return make_fisher_field([data](const Vector& b) { return score(*data, b); },
                           [data](const Vector& b) { return fisher(*data, b); }, static_cast<int>(d.p()),
                           "glm-fisher");
}

/// v = S with the analytic Jacobian -I.
inline VelocityField score_field(const Dataset& d) {
  auto data = std::make_shared<const Dataset>(d);
  return make_gradient_field([data](const Vector& b) { return score(*data, b); }, static_cast<int>(d.p()),
                             MatrixMap([data](const Vector& b) -> Matrix { return -fisher(*data, b); }));
}

// ---------------------------------------------------------------------------
// CSV + sidecar
// ---------------------------------------------------------------------------

inline std::string to_csv(const Dataset& d) {
  std::string out;
  for (Eigen::Index k = 0; k < d.p(); ++k) out += "x" + std::to_string(k + 1) + ",";
  out += "y\n";
  for (Eigen::Index j = 0; j < d.n(); ++j) {
    for (Eigen::Index k = 0; k < d.p(); ++k) out += fmt17(d.x()(j, k)) + ",";
    out += d.y()[j] == 1.0 ? "1\n" : "0\n";
  }
  return out;
}

inline std::string sidecar(const Dataset& d) {
  return "n=" + std::to_string(d.n()) + "\np=" + std::to_string(d.p()) + "\nbeta_star=" + join17(d.beta_star()) +
         "\nseed=" + std::to_string(d.seed()) + "\nlaw=" + to_string(d.law()) + "\n";
}

namespace detail {
inline std::vector<double> split_numbers(const std::string& s, char sep = ',') {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, sep)) {
    const auto v = parse_real(tok);
    if (!v) throw IoError("malformed number '" + tok + "'");
    out.push_back(*v);
  }
  return out;
}
}  // namespace detail

inline Dataset from_csv(const std::string& csv, const std::string& meta) {
  std::map<std::string, std::string> kv;
  {
    std::stringstream ms(meta);
    std::string line;
    while (std::getline(ms, line)) {
      const auto eq = line.find('=');
      if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
  }
  for (const char* key : {"n", "p", "beta_star", "seed", "law"})
    if (!kv.count(key)) throw IoError(std::string("dataset sidecar lacks key '") + key + "'");
  const long n = std::stol(kv["n"]);
  const long p = std::stol(kv["p"]);
  const auto beta = detail::split_numbers(kv["beta_star"]);
  if (static_cast<long>(beta.size()) != p) throw IoError("sidecar beta_star length differs from p");

  std::stringstream cs(csv);
  std::string line;
  std::getline(cs, line);
  Matrix x(n, p);
  Vector y(n);
  long row = 0;
  while (std::getline(cs, line)) {
    if (line.empty()) continue;
    if (row >= n) throw IoError("dataset CSV has more rows than sidecar n");
    const auto vals = detail::split_numbers(line);
    if (static_cast<long>(vals.size()) != p + 1) throw IoError("dataset CSV row " + std::to_string(row + 1) + " has wrong width");
    for (long k = 0; k < p; ++k) x(row, k) = vals[k];
    y[row] = vals[p];
    ++row;
  }
  if (row != n) throw IoError("dataset CSV row count differs from sidecar n");
  return Dataset(std::move(x), std::move(y), Eigen::Map<const Vector>(beta.data(), p), std::stoull(kv["seed"]),
                 parse_covariate_law(kv["law"]));
}

}  // namespace newtonflow::glm
