#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "crtgen/error.hpp"

namespace crtgen {

inline double expit(double x) noexcept {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double logit(double p) noexcept { return std::log(p / (1.0 - p)); }

/// log(1 + exp(x)) without overflow.
inline double softplus(double x) noexcept { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

struct LinearFit {
  Eigen::VectorXd coef;
  double predict(const Eigen::Ref<const Eigen::VectorXd>& features) const { return coef.dot(features); }
};

/// Ordinary least squares through a column-pivoting Householder QR.
inline LinearFit fit_linear(const Eigen::MatrixXd& features, const Eigen::VectorXd& targets) {
  if (features.rows() == 0) throw FitError(FitFailure::EmptyFit, "linear regression");
  if (features.rows() != targets.size()) throw std::invalid_argument("fit_linear: row count mismatch");
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(features);
  if (qr.rank() < features.cols()) throw FitError(FitFailure::RankDeficient, "linear regression");
  return LinearFit{qr.solve(targets)};
}

struct LogisticOptions {
  int max_iter = 100;
  double tol = 1e-8;          // sup-norm of the coefficient update
  int max_halvings = 10;
  double separation_bound = 30.0;
};

struct LogisticFit {
  Eigen::VectorXd coef;
  int iterations = 0;
  double deviance = 0.0;
  std::vector<double> deviance_path;  // deviance after each accepted step, starting at coef = 0

  double predict(const Eigen::Ref<const Eigen::VectorXd>& features) const { return expit(coef.dot(features)); }
};

namespace detail {
inline double logistic_deviance(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const Eigen::VectorXd& beta) {
  const Eigen::VectorXd eta = X * beta;
  double dev = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) dev += softplus(eta[i]) - y[i] * eta[i];
  return 2.0 * dev;
}
}  // namespace detail

/// Bernoulli maximum likelihood by iteratively reweighted least squares with
/// step-halving on deviance increase.
inline LogisticFit fit_logistic(const Eigen::MatrixXd& features, const Eigen::VectorXd& labels,
                                const LogisticOptions& opt = {}, const std::string& what = "logistic regression") {
  const Eigen::Index n = features.rows();
  const Eigen::Index k = features.cols();
  if (n == 0) throw FitError(FitFailure::EmptyFit, what);
  if (labels.size() != n) throw std::invalid_argument("fit_logistic: row count mismatch");
  double ones = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (labels[i] != 0.0 && labels[i] != 1.0) throw std::invalid_argument("fit_logistic: labels must be 0/1");
    ones += labels[i];
  }
  if (ones == 0 || ones == static_cast<double>(n)) throw FitError(FitFailure::Separation, what);
  {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(features);
    if (qr.rank() < k) throw FitError(FitFailure::RankDeficient, what);
  }

  LogisticFit fit;
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(k);
  double dev = detail::logistic_deviance(features, labels, beta);
  fit.deviance_path.push_back(dev);
  Eigen::VectorXd mu(n), wts(n);
  for (int it = 1; it <= opt.max_iter; ++it) {
    const Eigen::VectorXd eta = features * beta;
    for (Eigen::Index i = 0; i < n; ++i) {
      mu[i] = expit(eta[i]);
      wts[i] = mu[i] * (1.0 - mu[i]);
    }
    const Eigen::VectorXd score = features.transpose() * (labels - mu);
    const Eigen::MatrixXd info = features.transpose() * wts.asDiagonal() * features;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(info);
    Eigen::VectorXd step = ldlt.solve(score);
    if (ldlt.info() != Eigen::Success || !step.allFinite()) throw FitError(FitFailure::Separation, what);

    const double newton = step.cwiseAbs().maxCoeff();
    // near the optimum deviance differences fall to rounding level
    const double slack = 1e-12 * (1.0 + dev);
    Eigen::VectorXd candidate = beta + step;
    double cand_dev = detail::logistic_deviance(features, labels, candidate);
    for (int h = 0; h < opt.max_halvings && !(cand_dev <= dev + slack); ++h) {
      step *= 0.5;
      candidate = beta + step;
      cand_dev = detail::logistic_deviance(features, labels, candidate);
    }
    const bool accepted = cand_dev <= dev + slack;
    if (accepted) {
      beta = candidate;
      dev = cand_dev;
      fit.deviance_path.push_back(dev);
    }
    fit.iterations = it;
    if (beta.cwiseAbs().maxCoeff() > opt.separation_bound) throw FitError(FitFailure::Separation, what);
    if (newton < opt.tol || (!accepted && step.cwiseAbs().maxCoeff() < opt.tol)) {
      fit.coef = beta;
      fit.deviance = dev;
      return fit;
    }
  }
  throw FitError(FitFailure::NonConvergence, what);
}

}  // namespace crtgen
