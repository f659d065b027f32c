#include "newtonflow/glm.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace newtonflow;
using namespace newtonflow::glm;

namespace {

const Vector kBetaStar = (Vector(3) << -0.2, 0.2, -0.2).finished();
constexpr std::uint64_t kSeed = 20240101;

// Gradient ascent on the log-likelihood with backtracking line search; an
// optimizer that shares nothing with Fisher scoring.
Vector ascent_oracle(const Dataset& d, Vector beta) {
  for (int it = 0; it < 20000; ++it) {
    const Vector g = score(d, beta);
    if (g.lpNorm<Eigen::Infinity>() < 1e-9) break;
    double step = 1.0;
    const double l0 = loglik(d, beta);
    while (loglik(d, beta + step * g) < l0 + 1e-4 * step * g.squaredNorm()) step *= 0.5;
    beta += step * g;
  }
  return beta;
}

}  // namespace

TEST(Simulate, SymmetricParameterGivesBalancedLabels) {
  const Dataset d = simulate(100000, Vector::Zero(3), 1);
  EXPECT_NEAR(d.y().mean(), 0.5, 0.01);
}

TEST(Simulate, FixedCovariateMatchesSigmoid) {
  Matrix x = Matrix::Zero(100000, 3);
  x.col(0).setOnes();
  std::mt19937_64 rng(5);
  const Vector y = simulate_responses(x, (Vector(3) << 2.0, 0.0, 0.0).finished(), rng);
  EXPECT_NEAR(y.mean(), sigmoid(2.0), 0.01);
}

TEST(Simulate, PaperConfigurationShape) {
  const Dataset d = simulate(200, kBetaStar, kSeed);
  EXPECT_EQ(d.n(), 200);
  EXPECT_EQ(d.p(), 3);
  EXPECT_EQ(d.beta_star(), kBetaStar);
  EXPECT_EQ(d.seed(), kSeed);
}

TEST(Simulate, DeterministicBitExact) {
  for (auto law : {CovariateLaw::standard_normal, CovariateLaw::uniform_pm1}) {
    const Dataset a = simulate(500, kBetaStar, 99, law);
    const Dataset b = simulate(500, kBetaStar, 99, law);
    EXPECT_EQ(a.x(), b.x());
    EXPECT_EQ(a.y(), b.y());
    const Dataset c = simulate(500, kBetaStar, 100, law);
    EXPECT_NE(a.x(), c.x());
  }
}

TEST(Simulate, UniformLawStaysInRange) {
  const Dataset d = simulate(2000, kBetaStar, 3, CovariateLaw::uniform_pm1);
  EXPECT_LE(d.x().cwiseAbs().maxCoeff(), 1.0);
  EXPECT_NEAR(d.x().mean(), 0.0, 0.03);
}

TEST(Dataset, ValidatesContents) {
  EXPECT_THROW(Dataset(Matrix::Ones(3, 1), (Vector(3) << 0, 1, 0.5).finished()), InvalidArgument);
  EXPECT_THROW(Dataset(Matrix::Ones(1, 2), Vector::Zero(1)), InvalidArgument);
  EXPECT_THROW(Dataset(Matrix::Ones(4, 2), Vector::Zero(4)), InvalidArgument);  // rank 1
}

TEST(Loglik, ZeroParameterGivesNLog2) {
  const Dataset d = simulate(200, kBetaStar, kSeed);
  EXPECT_NEAR(loglik(d, Vector::Zero(3)), -200.0 * std::log(2.0), 1e-10);
}

TEST(Loglik, MatchesBruteForceLikelihoodProduct) {
  const Dataset d = simulate(30, kBetaStar, 4);
  const Vector b = (Vector(3) << 0.4, -1.1, 0.7).finished();
  double prod = 1.0;
  for (Eigen::Index j = 0; j < d.n(); ++j) {
    const double eta = d.x().row(j).dot(b);
    const double p1 = std::exp(eta) / (1.0 + std::exp(eta));
    prod *= d.y()[j] == 1.0 ? p1 : 1.0 - p1;
  }
  EXPECT_NEAR(loglik(d, b), std::log(prod), 1e-10);
}

TEST(Loglik, StableForLargeLinearPredictors) {
  EXPECT_EQ(softplus(800.0), 800.0);
  EXPECT_NEAR(softplus(-800.0), 0.0, 1e-300);
  EXPECT_NEAR(softplus(30.5), 30.5 + std::exp(-30.5), 1e-13);
  EXPECT_EQ(sigmoid(-1000.0), 0.0);
  EXPECT_EQ(sigmoid(1000.0), 1.0);
  const Dataset d = simulate(50, kBetaStar, 2);
  EXPECT_TRUE(std::isfinite(loglik(d, Vector::Constant(3, 500.0))));
}

TEST(Score, VanishesWhenLabelsAverageToFittedProbabilities) {
  // Every covariate row appears once with y=1 and once with y=0; at beta=0
  // each pair contributes x (1 - 1/2) + x (0 - 1/2) = 0.
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n01;
  Matrix x(40, 2);
  Vector y(40);
  for (int j = 0; j < 20; ++j) {
    x(2 * j, 0) = x(2 * j + 1, 0) = n01(rng);
    x(2 * j, 1) = x(2 * j + 1, 1) = n01(rng);
    y[2 * j] = 1.0;
    y[2 * j + 1] = 0.0;
  }
  const Dataset d(x, y);
  EXPECT_LE(score(d, Vector::Zero(2)).norm(), 1e-14);
}

TEST(Score, EqualsFiniteDifferenceGradientOfLoglik) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int k = 0; k < 50; ++k) {
    const Dataset d = simulate(100 + 10 * k, kBetaStar, 1000 + k);
    Vector b = Vector::NullaryExpr(3, [&] { return u(rng); });
    b *= 2.0 * u(rng) / std::max(1.0, b.norm());  // ||b|| <= 2
    const Vector s = score(d, b);
    const Vector fd = numeric_gradient([&d](const Vector& v) { return loglik(d, v); }, b, Vector::Constant(3, 1e-5));
    EXPECT_LE((s - fd).cwiseAbs().maxCoeff(), 1e-6 * std::max(1.0, s.cwiseAbs().maxCoeff())) << "pair " << k;
  }
}

TEST(Fisher, TwoPointExample) {
  const Dataset d(Matrix::Ones(2, 1), (Vector(2) << 1, 0).finished());
  EXPECT_NEAR(fisher(d, Vector::Zero(1))(0, 0), 0.5, 1e-15);
}

TEST(Fisher, EqualsNegativeJacobianOfScore) {
  const Dataset d = simulate(200, kBetaStar, kSeed);
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (int k = 0; k < 50; ++k) {
    const Vector b = Vector::NullaryExpr(3, [&] { return u(rng); });
    const Matrix info = fisher(d, b);
    const Matrix fd = -numeric_jacobian([&d](const Vector& v) { return score(d, v); }, b);
    EXPECT_LE((info - fd).cwiseAbs().maxCoeff(), 1e-5 * info.cwiseAbs().maxCoeff());
    EXPECT_LE((info + numeric_jacobian([&d](const Vector& v) { return score(d, v); }, b)).cwiseAbs().maxCoeff(),
              1e-4 * info.norm());
  }
}

TEST(Fisher, SymmetricPositiveSemidefinite) {
  const Dataset d = simulate(200, kBetaStar, kSeed);
  std::mt19937_64 rng(14);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  for (int k = 0; k < 100; ++k) {
    const Matrix info = fisher(d, Vector::NullaryExpr(3, [&] { return u(rng); }));
    EXPECT_EQ(info, info.transpose());
    const double min_eig = Eigen::SelfAdjointEigenSolver<Matrix>(info).eigenvalues().minCoeff();
    EXPECT_GE(min_eig, -1e-12 * info.trace());
  }
}

TEST(Bartlett, IdentitiesHoldWithinThreeStandardErrors) {
  const auto rep = bartlett_check(kBetaStar, 200, 400, 77);
  EXPECT_TRUE(rep.std_errors_defined);
  EXPECT_TRUE(rep.first_identity_holds());
  EXPECT_TRUE(rep.second_identity_holds());
  // For the canonical link the negative Hessian is the closed-form information.
  EXPECT_LE((rep.mean_neg_hessian - rep.fisher).cwiseAbs().maxCoeff(), 1e-6 * rep.fisher.cwiseAbs().maxCoeff());
}

TEST(Bartlett, SingleReplicationFlagsUndefinedErrors) {
  const auto rep = bartlett_check(kBetaStar, 200, 1, 77);
  EXPECT_FALSE(rep.std_errors_defined);
  EXPECT_TRUE(std::isnan(rep.score_std_error[0]));
  EXPECT_FALSE(rep.first_identity_holds());
  EXPECT_EQ(rep.mean_score.size(), 3);
}

TEST(Bartlett, IndependentOfThreadCount) {
  const auto a = bartlett_check(kBetaStar, 100, 64, 5, CovariateLaw::standard_normal, 1);
  const auto b = bartlett_check(kBetaStar, 100, 64, 5, CovariateLaw::standard_normal, 4);
  EXPECT_EQ(a.mean_score, b.mean_score);
  EXPECT_EQ(a.mean_neg_hessian, b.mean_neg_hessian);
  EXPECT_EQ(a.identity_std_error, b.identity_std_error);
}

TEST(Bartlett, WrongParameterBreaksFirstIdentity) {
  // Scores evaluated away from the generating parameter have nonzero mean.
  const Vector wrong = (Vector(3) << 0.8, 0.2, -0.2).finished();
  auto rep = bartlett_check(kBetaStar, 200, 300, 3);
  const Vector s_wrong_mean = [&] {
    Vector m = Vector::Zero(3);
    for (int r = 0; r < 300; ++r) m += score(simulate(200, kBetaStar, derive_seed(3, r)), wrong);
    return Vector(m / 300.0);
  }();
  EXPECT_GT(std::abs(s_wrong_mean[0]), 10.0 * rep.score_std_error[0]);
}

TEST(Mle, SeparableDataDoesNotConverge) {
  const Dataset d(Matrix::Ones(5, 1), Vector::Ones(5));
  EXPECT_THROW(fisher_scoring_solve(d, Vector::Zero(1)), NonConvergence);
  try {
    fisher_scoring_solve(d, Vector::Zero(1));
  } catch (const NonConvergence& e) {
    EXPECT_GT(e.last_iterate()[0], 5.0);
  }
}

TEST(Mle, PaperDatasetConvergesAndMatchesGradientAscent) {
  const Dataset d = simulate(200, kBetaStar, kSeed);
  const MleResult r = fisher_scoring_solve(d, Vector::Zero(3));
  EXPECT_LE(r.final_score_norm, 1e-10);
  EXPECT_LE(score(d, r.beta_hat).lpNorm<Eigen::Infinity>(), 1e-10);
  EXPECT_LE(r.iterations, 25);
  const Vector oracle = ascent_oracle(d, Vector::Zero(3));
  EXPECT_LE((r.beta_hat - oracle).lpNorm<Eigen::Infinity>(), 1e-8);
}

TEST(Mle, FixedPointStart) {
  const Dataset d = simulate(200, kBetaStar, kSeed);
  const MleResult r = fisher_scoring_solve(d, Vector::Zero(3));
  const MleResult again = fisher_scoring_solve(d, r.beta_hat);
  EXPECT_LE(again.iterations, 1);
  EXPECT_LE((again.beta_hat - r.beta_hat).norm(), 1e-10);
}

TEST(Mle, IterationCapReported) {
  const Dataset d = simulate(200, kBetaStar, kSeed);
  try {
    fisher_scoring_solve(d, Vector::Zero(3), 1e-10, 1);
    FAIL() << "expected NonConvergence";
  } catch (const NonConvergence& e) {
    EXPECT_EQ(e.iterations(), 1);
    EXPECT_EQ(e.last_iterate().size(), 3);
  }
}

TEST(GlmFields, FisherFieldMatchesDenseSolveAtBetaStar) {
  const Dataset d = simulate(200, kBetaStar, kSeed);
  const VelocityField f = fisher_field(d);
  const Vector v = f(kBetaStar);
  const Vector oracle = fisher(d, kBetaStar).inverse() * score(d, kBetaStar);
  EXPECT_TRUE(v.allFinite());
  EXPECT_LE((v - oracle).norm(), 1e-12 * oracle.norm());
  EXPECT_EQ(f.label(), "glm-fisher");
}

TEST(GlmFields, ScoreFieldVanishesAtMle) {
  const Dataset d = simulate(200, kBetaStar, kSeed);
  const MleResult r = fisher_scoring_solve(d, Vector::Zero(3));
  const VelocityField f = score_field(d);
  EXPECT_LE(f(r.beta_hat).lpNorm<Eigen::Infinity>(), 1e-10);
  EXPECT_EQ(f.jacobian(kBetaStar), -fisher(d, kBetaStar));
}

TEST(DatasetIo, CsvRoundTripIsBitExact) {
  const Dataset d = simulate(60, kBetaStar, 21, CovariateLaw::uniform_pm1);
  const std::string csv = to_csv(d);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "x1,x2,x3,y");
  const Dataset e = from_csv(csv, sidecar(d));
  EXPECT_EQ(e.x(), d.x());
  EXPECT_EQ(e.y(), d.y());
  EXPECT_EQ(e.beta_star(), d.beta_star());
  EXPECT_EQ(e.seed(), d.seed());
  EXPECT_EQ(e.law(), d.law());
}

TEST(DatasetIo, MalformedInputRaisesIoError) {
  const Dataset d = simulate(10, kBetaStar, 21);
  EXPECT_THROW(from_csv(to_csv(d), "n=10\np=3\n"), IoError);
  EXPECT_THROW(from_csv("x1,x2,x3,y\n1,2,x,1\n", sidecar(d)), IoError);
  EXPECT_THROW(from_csv("x1,x2,x3,y\n1,2,3,1\n", sidecar(d)), IoError);
}
