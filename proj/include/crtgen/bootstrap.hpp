#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "crtgen/data_model.hpp"
#include "crtgen/estimators.hpp"
#include "crtgen/inference.hpp"
#include "crtgen/nuisance.hpp"
#include "crtgen/parallel.hpp"
#include "crtgen/random.hpp"

namespace crtgen {

enum class OnDegenerate { Skip, Error };

inline OnDegenerate parse_on_degenerate(std::string_view s) {
  if (s == "skip") return OnDegenerate::Skip;
  if (s == "error") return OnDegenerate::Error;
  throw ConfigError("unknown on_degenerate '" + std::string(s) + "' (expected skip|error)");
}
inline std::string_view to_string(OnDegenerate d) { return d == OnDegenerate::Skip ? "skip" : "error"; }

struct BootstrapConfig {
  std::size_t replicates = 250;
  std::uint64_t seed = 0;
  OnDegenerate on_degenerate = OnDegenerate::Skip;
  unsigned threads = 1;
};

struct BootstrapResult {
  std::optional<double> se;     // absent with fewer than 2 completed replicates
  std::vector<double> replicates;  // completed replicates, in replicate order
  std::size_t skipped = 0;
};

/// Cluster indices drawn with replacement for replicate r; depends on (seed, r) only.
inline std::vector<std::uint32_t> bootstrap_picks(std::size_t m, std::uint64_t seed, std::size_t r) {
  auto eng = make_engine(seed, {streams::kBootstrap, r});
  std::uniform_int_distribution<std::uint32_t> pick(0, static_cast<std::uint32_t>(m - 1));
  std::vector<std::uint32_t> out(m);
  for (auto& k : out) k = pick(eng);
  return out;
}

/// Clustered nonparametric bootstrap of a vector-valued statistic: each
/// replicate resamples m whole clusters with replacement and re-evaluates
/// `statistic` on the resampled dataset. A replicate whose statistic throws
/// EstimationError or FitError is degenerate.
template <class Statistic>
std::vector<BootstrapResult> bootstrap_statistics(const ClusterDataset& ds, std::size_t n_stats,
                                                  const BootstrapConfig& cfg, Statistic&& statistic) {
  if (cfg.replicates < 1) throw ConfigError("bootstrap replicates must be >= 1");
  if (ds.empty()) throw EstimationError("bootstrap of an empty dataset");
  std::vector<std::optional<std::vector<double>>> slots(cfg.replicates);
  std::vector<std::string> failures(cfg.replicates);
  parallel_for(cfg.replicates, cfg.threads, [&](std::size_t r) {
    auto resampled = ds.resample(bootstrap_picks(ds.size(), cfg.seed, r));
    try {
      std::vector<double> v = statistic(resampled);
      if (v.size() != n_stats) throw std::logic_error("bootstrap statistic returned the wrong arity");
      slots[r] = std::move(v);
    } catch (const EstimationError& e) {
      failures[r] = e.what();
    } catch (const FitError& e) {
      failures[r] = e.what();
    }
  });
  std::vector<BootstrapResult> out(n_stats);
  for (std::size_t r = 0; r < cfg.replicates; ++r) {
    if (!slots[r]) {
      if (cfg.on_degenerate == OnDegenerate::Error)
        throw EstimationError("bootstrap replicate " + std::to_string(r) + " degenerate: " + failures[r]);
      for (auto& o : out) ++o.skipped;
      continue;
    }
    for (std::size_t k = 0; k < n_stats; ++k) out[k].replicates.push_back((*slots[r])[k]);
  }
  for (auto& o : out)
    if (o.replicates.size() >= 2) o.se = std::sqrt(sample_variance(o.replicates));
  return out;
}

/// Bootstrap standard error of one estimator for one target, refitting every
/// estimated nuisance model inside each replicate. Known probabilities are
/// carried by the clusters and pass through unchanged.
inline BootstrapResult cluster_bootstrap(const ClusterDataset& ds, EstimatorKind kind, const EstimandTarget& target,
                                         NuisanceConfig nuisance, const BootstrapConfig& cfg) {
  if (!uses_outcome_model(kind)) nuisance.outcome_mode = OutcomeMode::None;
  auto res = bootstrap_statistics(ds, 1, cfg, [&](const ClusterDataset& b) {
    if (kind == EstimatorKind::TrialOnly) {
      double v = trial_only(b, target.arm);
      if (target.reference) v -= trial_only(b, *target.reference);
      return std::vector<double>{v};
    }
    auto nu = fit_nuisance(b, nuisance);
    auto a = estimate_arm(b, kind, target.population, target.arm, nu);
    double v = a.point;
    if (target.reference) v -= estimate_arm(b, kind, target.population, *target.reference, nu).point;
    return std::vector<double>{v};
  });
  return std::move(res.front());
}

}  // namespace crtgen
