#pragma once

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "crtgen/data_model.hpp"

namespace fixtures {

using crtgen::Arm;
using crtgen::ClusterRecord;

/// Randomized cluster with a single cluster covariate and one individual
/// covariate column.
inline ClusterRecord trial(const std::string& id, std::vector<double> x, Arm a, std::vector<double> y,
                           std::optional<double> p = std::nullopt, std::vector<double> w = {}) {
  if (w.empty()) w.assign(y.size(), 0.0);
  Eigen::MatrixXd wm(static_cast<Eigen::Index>(w.size()), 1);
  for (std::size_t i = 0; i < w.size(); ++i) wm(static_cast<Eigen::Index>(i), 0) = w[i];
  return ClusterRecord(id, std::move(x), wm, true, a, std::move(y), p);
}

inline ClusterRecord outside(const std::string& id, std::vector<double> x, std::optional<double> p = std::nullopt,
                             std::vector<double> w = {0.0}) {
  Eigen::MatrixXd wm(static_cast<Eigen::Index>(w.size()), 1);
  for (std::size_t i = 0; i < w.size(); ++i) wm(static_cast<Eigen::Index>(i), 0) = w[i];
  return ClusterRecord(id, std::move(x), wm, false, std::nullopt, std::nullopt, p);
}

/// Random small cohort: binary x, two individual covariates, binary outcomes,
/// design probabilities attached.
inline crtgen::ClusterDataset random_cohort(std::uint64_t seed, int m, double p1 = 0.6, double p0 = 0.3) {
  std::mt19937_64 eng(seed);
  std::normal_distribution<double> n01;
  std::bernoulli_distribution coin(0.5);
  std::vector<ClusterRecord> recs;
  for (int j = 0; j < m; ++j) {
    const double x = (j % 3 == 0) ? 1.0 : 0.0;
    const double p = x == 1.0 ? p1 : p0;
    const bool s = (j < 8) ? (j % 2 == 0) : std::bernoulli_distribution(p)(eng);
    const Eigen::Index n = 2 + j % 5;
    Eigen::MatrixXd w(n, 2);
    const double mu = n01(eng);
    for (Eigen::Index i = 0; i < n; ++i) w(i, 0) = mu + n01(eng), w(i, 1) = n01(eng);
    std::optional<Arm> a;
    std::optional<std::vector<double>> y;
    if (s) {
      a = (j < 8) ? (j / 2) % 2 : static_cast<Arm>(coin(eng));
      y.emplace();
      for (Eigen::Index i = 0; i < n; ++i) y->push_back(coin(eng) ? 1.0 : 0.0);
    }
    recs.emplace_back("c" + std::to_string(j), std::vector<double>{x}, w, s, a, y, p);
  }
  return crtgen::ClusterDataset(std::move(recs), {0, 1});
}

}  // namespace fixtures
