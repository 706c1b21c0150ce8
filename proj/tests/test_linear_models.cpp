#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "crtgen/linear_models.hpp"

using namespace crtgen;
using Catch::Matchers::WithinAbs;

namespace {

double log_likelihood(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const Eigen::VectorXd& b) {
  double ll = 0.0;
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const double eta = X.row(i).dot(b);
    ll += y[i] * eta - std::log1p(std::exp(eta));
  }
  return ll;
}

// Coarse-to-fine grid maximizer of the Bernoulli log-likelihood; shares no
// code with IRLS.
Eigen::VectorXd grid_maximizer(const Eigen::MatrixXd& X, const Eigen::VectorXd& y) {
  const Eigen::Index k = X.cols();
  Eigen::VectorXd center = Eigen::VectorXd::Zero(k);
  double half = 8.0;
  const int steps = 10;  // 21 points per axis
  for (int pass = 0; pass < 9; ++pass) {
    Eigen::VectorXd best = center;
    double best_ll = log_likelihood(X, y, center);
    std::vector<int> idx(static_cast<std::size_t>(k), -steps);
    for (;;) {
      Eigen::VectorXd b(k);
      for (Eigen::Index c = 0; c < k; ++c) b[c] = center[c] + half * idx[static_cast<std::size_t>(c)] / steps;
      const double ll = log_likelihood(X, y, b);
      if (ll > best_ll) best_ll = ll, best = b;
      Eigen::Index c = 0;
      while (c < k && ++idx[static_cast<std::size_t>(c)] > steps) idx[static_cast<std::size_t>(c++)] = -steps;
      if (c == k) break;
    }
    center = best;
    half /= 4.0;
  }
  return center;
}

}  // namespace

TEST_CASE("fit_linear interpolates exact data", "[linear_models]") {
  Eigen::MatrixXd X(3, 2);
  X << 1, 0, 1, 1, 1, 2;
  Eigen::VectorXd y(3);
  y << 1, 3, 5;
  auto fit = fit_linear(X, y);
  CHECK_THAT(fit.coef[0], WithinAbs(1.0, 1e-12));
  CHECK_THAT(fit.coef[1], WithinAbs(2.0, 1e-12));

  Eigen::VectorXd c = Eigen::VectorXd::Constant(3, 4.25);
  auto flat = fit_linear(X, c);
  CHECK_THAT(flat.coef[0], WithinAbs(4.25, 1e-12));
  CHECK_THAT(flat.coef[1], WithinAbs(0.0, 1e-12));
}

TEST_CASE("fit_linear residuals are orthogonal to the columns", "[linear_models]") {
  std::mt19937_64 eng(3);
  std::normal_distribution<double> n01;
  Eigen::MatrixXd X(10, 3);
  Eigen::VectorXd y(10);
  for (Eigen::Index i = 0; i < 10; ++i) {
    for (Eigen::Index k = 0; k < 3; ++k) X(i, k) = n01(eng);
    y[i] = n01(eng);
  }
  auto fit = fit_linear(X, y);
  // normal equations oracle
  Eigen::VectorXd normal = (X.transpose() * X).inverse() * X.transpose() * y;
  CHECK((fit.coef - normal).cwiseAbs().maxCoeff() < 1e-10);
  Eigen::VectorXd resid = y - X * fit.coef;
  CHECK((X.transpose() * resid).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("fit_linear rejects rank deficiency", "[linear_models]") {
  Eigen::MatrixXd X(4, 2);
  X << 1, 2, 1, 2, 1, 2, 1, 2;
  Eigen::VectorXd y = Eigen::VectorXd::Ones(4);
  try {
    fit_linear(X, y);
    FAIL("expected FitError");
  } catch (const FitError& e) {
    CHECK(e.kind() == FitFailure::RankDeficient);
  }
}

TEST_CASE("fit_logistic intercept-only is the logit of the mean", "[linear_models]") {
  Eigen::MatrixXd X = Eigen::MatrixXd::Ones(8, 1);
  Eigen::VectorXd y(8);
  y << 1, 0, 0, 0, 1, 0, 0, 0;
  auto fit = fit_logistic(X, y);
  CHECK_THAT(fit.coef[0], WithinAbs(std::log(0.25 / 0.75), 1e-9));
  CHECK_THAT(fit.coef[0], WithinAbs(-1.0986, 1e-4));
}

TEST_CASE("fit_logistic reports separation", "[linear_models]") {
  Eigen::MatrixXd X = Eigen::MatrixXd::Ones(5, 1);
  try {
    fit_logistic(X, Eigen::VectorXd::Zero(5));
    FAIL("expected FitError");
  } catch (const FitError& e) {
    CHECK(e.kind() == FitFailure::Separation);
  }
  // complete separation along a covariate
  Eigen::MatrixXd X2(6, 2);
  X2 << 1, -3, 1, -2, 1, -1, 1, 1, 1, 2, 1, 3;
  Eigen::VectorXd y2(6);
  y2 << 0, 0, 0, 1, 1, 1;
  try {
    fit_logistic(X2, y2);
    FAIL("expected FitError");
  } catch (const FitError& e) {
    CHECK(e.kind() == FitFailure::Separation);
  }
}

TEST_CASE("fit_logistic rejects rank deficiency and reports non-convergence", "[linear_models]") {
  Eigen::MatrixXd X(4, 2);
  X << 1, 1, 1, 1, 1, 1, 1, 1;
  Eigen::VectorXd y(4);
  y << 0, 1, 0, 1;
  CHECK_THROWS_AS(fit_logistic(X, y), FitError);

  Eigen::MatrixXd X3(6, 2);
  X3 << 1, -1, 1, 0.5, 1, 2, 1, -0.3, 1, 1.1, 1, 0.2;
  Eigen::VectorXd y3(6);
  y3 << 0, 1, 1, 0, 0, 1;
  LogisticOptions one_step;
  one_step.max_iter = 1;
  try {
    fit_logistic(X3, y3, one_step);
    FAIL("expected FitError");
  } catch (const FitError& e) {
    CHECK(e.kind() == FitFailure::NonConvergence);
  }
}

TEST_CASE("fit_logistic matches a brute-force likelihood grid", "[linear_models][oracle]") {
  Eigen::MatrixXd X(8, 3);
  X << 1, 0.5, 1.0,   //
      1, 1.2, -0.5,   //
      1, -0.3, 0.3,   //
      1, 2.0, 0.2,    //
      1, -1.0, -1.2,  //
      1, 0.8, 1.5,    //
      1, 1.5, -0.8,   //
      1, -0.7, 0.4;
  Eigen::VectorXd y(8);
  y << 1, 0, 1, 1, 0, 0, 1, 0;
  auto fit = fit_logistic(X, y);
  auto oracle = grid_maximizer(X, y);
  INFO("irls " << fit.coef.transpose() << " grid " << oracle.transpose());
  CHECK((fit.coef - oracle).cwiseAbs().maxCoeff() < 1e-4);
}

TEST_CASE("IRLS deviance never increases", "[linear_models][property]") {
  std::mt19937_64 eng(19);
  std::normal_distribution<double> n01;
  for (int rep = 0; rep < 30; ++rep) {
    const Eigen::Index n = 20 + rep * 3;
    Eigen::MatrixXd X(n, 3);
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      X(i, 0) = 1;
      X(i, 1) = n01(eng);
      X(i, 2) = 3.0 * n01(eng);
      y[i] = std::bernoulli_distribution(expit(0.5 + X(i, 1) - 0.4 * X(i, 2)))(eng) ? 1.0 : 0.0;
    }
    try {
      auto fit = fit_logistic(X, y);
      for (std::size_t t = 1; t < fit.deviance_path.size(); ++t)
        CHECK(fit.deviance_path[t] <= fit.deviance_path[t - 1] + 1e-12 * (1 + fit.deviance_path[t - 1]));
      // score equations hold at the optimum
      Eigen::VectorXd mu(n);
      for (Eigen::Index i = 0; i < n; ++i) mu[i] = fit.predict(X.row(i).transpose());
      CHECK((X.transpose() * (y - mu)).cwiseAbs().maxCoeff() < 1e-9);
    } catch (const FitError& e) {
      CHECK(e.kind() == FitFailure::Separation);
    }
  }
}
