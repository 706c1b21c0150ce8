#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "crtgen/data_model.hpp"
#include "crtgen/error.hpp"
#include "crtgen/inference.hpp"
#include "crtgen/nuisance.hpp"

namespace crtgen {

enum class Population { Entire, NonRandomized };

enum class EstimatorKind { TrialOnly, Ipw, Aipw, Iow, Aiow, AiowIndicator, OutcomeOnly };

inline std::string_view to_string(EstimatorKind k) {
  switch (k) {
    case EstimatorKind::TrialOnly: return "trial_only";
    case EstimatorKind::Ipw: return "ipw";
    case EstimatorKind::Aipw: return "aipw";
    case EstimatorKind::Iow: return "iow";
    case EstimatorKind::Aiow: return "aiow";
    case EstimatorKind::AiowIndicator: return "aiow_indicator";
    case EstimatorKind::OutcomeOnly: return "outcome_only";
  }
  return "?";
}

inline EstimatorKind parse_estimator_kind(std::string_view s) {
  for (auto k : {EstimatorKind::TrialOnly, EstimatorKind::Ipw, EstimatorKind::Aipw, EstimatorKind::Iow,
                 EstimatorKind::Aiow, EstimatorKind::AiowIndicator, EstimatorKind::OutcomeOnly})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown estimator kind '" + std::string(s) + "'");
}

/// Whether the estimator needs an outcome model.
constexpr bool uses_outcome_model(EstimatorKind k) {
  return k == EstimatorKind::Aipw || k == EstimatorKind::Aiow || k == EstimatorKind::AiowIndicator ||
         k == EstimatorKind::OutcomeOnly;
}

/// Whether the estimator can target the given population.
constexpr bool supports(EstimatorKind k, Population pop) {
  switch (k) {
    case EstimatorKind::TrialOnly:
    case EstimatorKind::OutcomeOnly: return true;
    case EstimatorKind::Ipw:
    case EstimatorKind::Aipw: return pop == Population::Entire;
    case EstimatorKind::Iow:
    case EstimatorKind::Aiow:
    case EstimatorKind::AiowIndicator: return pop == Population::NonRandomized;
  }
  return false;
}

/// A mean potential outcome for one arm, or the contrast arm - reference,
/// in the whole cohort or in its non-randomized subset.
struct EstimandTarget {
  Population population = Population::Entire;
  Arm arm = 1;
  std::optional<Arm> reference;

  bool is_contrast() const noexcept { return reference.has_value(); }

  std::string label() const {
    std::string base;
    if (reference) {
      base = (arm == 1 && *reference == 0) ? "ATE"
                                           : "contrast(" + std::to_string(arm) + "," + std::to_string(*reference) + ")";
    } else {
      base = "mean(" + std::to_string(arm) + ")";
    }
    return population == Population::NonRandomized ? base + "|S=0" : base;
  }

  friend bool operator==(const EstimandTarget&, const EstimandTarget&) = default;
};

/// Parses "mean(a)", "contrast(a,b)", "ATE", each optionally suffixed "|S=0".
inline EstimandTarget parse_target(std::string_view s) {
  EstimandTarget t;
  constexpr std::string_view suffix = "|S=0";
  if (s.size() > suffix.size() && s.substr(s.size() - suffix.size()) == suffix) {
    t.population = Population::NonRandomized;
    s.remove_suffix(suffix.size());
  }
  auto parse_int = [&](std::string_view v) {
    auto r = csv::parse_int(v);
    if (!r) throw ConfigError("bad arm label in target '" + std::string(s) + "'");
    return static_cast<Arm>(*r);
  };
  if (s == "ATE") {
    t.arm = 1;
    t.reference = 0;
  } else if (s.starts_with("mean(") && s.ends_with(")")) {
    t.arm = parse_int(s.substr(5, s.size() - 6));
  } else if (s.starts_with("contrast(") && s.ends_with(")")) {
    auto inner = s.substr(9, s.size() - 10);
    auto comma = inner.find(',');
    if (comma == std::string_view::npos) throw ConfigError("contrast target needs two arms: '" + std::string(s) + "'");
    t.arm = parse_int(inner.substr(0, comma));
    t.reference = parse_int(inner.substr(comma + 1));
  } else {
    throw ConfigError("unknown target '" + std::string(s) + "'");
  }
  if (t.reference && *t.reference == t.arm) throw ConfigError("contrast arms must differ");
  return t;
}

struct EstimateResult {
  EstimandTarget target;
  std::string estimator_name;
  double point = 0.0;
  std::vector<double> influence_curve;  // empty for the trial-only and outcome-only estimators
  std::optional<double> se_ic;
  std::optional<double> se_bootstrap;
  std::optional<IntervalEstimate> ci;
  std::optional<IntervalEstimate> ci_bootstrap;
  std::size_t bootstrap_completed = 0;
  std::size_t bootstrap_skipped = 0;
  std::size_t positivity_clipped = 0;
  std::vector<ModelDiagnostics> nuisance_diagnostics;
};

// ---------------------------------------------------------------------------
// Kernels over evaluated per-arm inputs. Every kernel returns the point
// estimate and the per-cluster influence curve.

struct PointAndCurve {
  double point = 0.0;
  std::vector<double> ic;
};

namespace kernel {

/// (1/m) sum { I(S=1,A=a)/(p e) (Ybar - g) + g }. With g = 0 this is the
/// inverse probability weighting estimator, evaluated by the same
/// arithmetic, so the two agree bit for bit.
inline PointAndCurve augmented_psi(const ArmView& v) {
  const std::size_t m = v.in_arm.size();
  if (m == 0) throw EstimationError("empty dataset");
  std::vector<double> term(m);
  double sum = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    const double w = v.in_arm[j] / (v.p[j] * v.e[j]);
    term[j] = w * (v.ybar[j] - v.g[j]) + v.g[j];
    sum += term[j];
  }
  PointAndCurve out;
  out.point = sum / static_cast<double>(m);
  for (auto& t : term) t -= out.point;
  out.ic = std::move(term);
  return out;
}

enum class SecondTerm { OneMinusP, Indicator };

/// Augmented inverse odds weighting for the non-randomized subset. The second
/// sum weights g by (1 - p) or, for the comparator, by I(S = 0).
inline PointAndCurve augmented_phi(const ArmView& v, SecondTerm second) {
  const std::size_t m = v.in_arm.size();
  double n0 = 0.0;
  for (double u : v.unselected) n0 += u;
  if (n0 == 0.0) throw EstimationError("no non-randomized (S=0) clusters: S=0 estimand undefined");
  std::vector<double> first(m), weight(m);
  double sum_first = 0.0, sum_second = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    const double odds = v.in_arm[j] * (1.0 - v.p[j]) / (v.p[j] * v.e[j]);
    first[j] = odds * (v.ybar[j] - v.g[j]);
    weight[j] = second == SecondTerm::OneMinusP ? 1.0 - v.p[j] : v.unselected[j];
    sum_first += first[j];
    sum_second += weight[j] * v.g[j];
  }
  PointAndCurve out;
  out.point = sum_first / n0 + sum_second / n0;
  const double pi_hat = n0 / static_cast<double>(m);
  out.ic.resize(m);
  for (std::size_t j = 0; j < m; ++j) out.ic[j] = (first[j] + weight[j] * (v.g[j] - out.point)) / pi_hat;
  return out;
}

inline double trial_only(const ArmView& v) {
  double sum = 0.0, n = 0.0;
  for (std::size_t j = 0; j < v.in_arm.size(); ++j) {
    sum += v.in_arm[j] * v.ybar[j];
    n += v.in_arm[j];
  }
  if (n == 0.0) throw EstimationError("trial-only estimator: no randomized clusters in arm");
  return sum / n;
}

/// Plug-in of the outcome model: mean of g over all clusters, or over S = 0.
/// No influence curve: the plug-in curve would ignore the outcome model's
/// estimation error entirely.
inline double outcome_only(const ArmView& v, Population pop) {
  double n = 0.0, sum = 0.0;
  for (std::size_t j = 0; j < v.g.size(); ++j) {
    const double keep = pop == Population::Entire ? 1.0 : v.unselected[j];
    n += keep;
    sum += keep * v.g[j];
  }
  if (n == 0.0)
    throw EstimationError(pop == Population::Entire ? "empty dataset"
                                                    : "no non-randomized (S=0) clusters: S=0 estimand undefined");
  return sum / n;
}

/// Dispatch for one arm; views passed to non-augmented kinds must carry g = 0.
inline PointAndCurve evaluate(EstimatorKind kind, Population pop, const ArmView& v) {
  if (!supports(kind, pop))
    throw ConfigError(std::string(to_string(kind)) + " does not estimate " +
                      (pop == Population::Entire ? "whole-cohort" : "S=0") + " targets");
  switch (kind) {
    case EstimatorKind::TrialOnly: return {trial_only(v), {}};
    case EstimatorKind::Ipw:
    case EstimatorKind::Aipw: return augmented_psi(v);
    case EstimatorKind::Iow:
    case EstimatorKind::Aiow: return augmented_phi(v, SecondTerm::OneMinusP);
    case EstimatorKind::AiowIndicator: return augmented_phi(v, SecondTerm::Indicator);
    case EstimatorKind::OutcomeOnly: return {outcome_only(v, pop), {}};
  }
  throw ConfigError("unknown estimator");
}

inline PointAndCurve difference(const PointAndCurve& a, const PointAndCurve& b) {
  PointAndCurve out;
  out.point = a.point - b.point;
  if (!a.ic.empty() && !b.ic.empty()) {
    out.ic.resize(a.ic.size());
    for (std::size_t j = 0; j < a.ic.size(); ++j) out.ic[j] = a.ic[j] - b.ic[j];
  }
  return out;
}

}  // namespace kernel

// ---------------------------------------------------------------------------
// Dataset-level estimators

namespace detail {

inline void require_arm(const ClusterDataset& ds, Arm arm) {
  if (ds.count_arm(arm) == 0) throw EstimationError("no randomized clusters in arm " + std::to_string(arm));
}

inline ArmInputs inputs_for(const ClusterDataset& ds, EstimatorKind kind, Arm arm, const FittedNuisance& nu) {
  require_arm(ds, arm);
  const bool need_g = uses_outcome_model(kind);
  if (need_g && !nu.has_outcome(arm))
    throw EstimationError(std::string(to_string(kind)) + " requires an outcome model for arm " + std::to_string(arm));
  return evaluate_arm(ds, nu, arm, need_g);
}

inline EstimateResult finish(EstimandTarget target, EstimatorKind kind, PointAndCurve pc, std::size_t clipped,
                             const FittedNuisance* nu, double level) {
  EstimateResult r;
  r.target = target;
  r.estimator_name = std::string(to_string(kind));
  r.point = pc.point;
  r.influence_curve = std::move(pc.ic);
  r.positivity_clipped = clipped;
  if (r.influence_curve.size() >= 2) {
    r.se_ic = std::sqrt(ic_variance(r.influence_curve));
    r.ci = wald_interval(r.point, *r.se_ic, level, SeSource::InfluenceCurve);
  }
  if (nu) r.nuisance_diagnostics = nu->diagnostics();
  return r;
}

}  // namespace detail

/// Unweighted mean of the cluster-average outcomes of randomized clusters in `arm`.
inline double trial_only(const ClusterDataset& ds, Arm arm) {
  detail::require_arm(ds, arm);
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& r : ds.records())
    if (r.in_arm(arm)) {
      sum += r.ybar_or_zero();
      ++n;
    }
  return sum / static_cast<double>(n);
}

/// Point estimate and influence curve of one estimator for one arm.
inline PointAndCurve estimate_arm(const ClusterDataset& ds, EstimatorKind kind, Population pop, Arm arm,
                                  const FittedNuisance& nu, std::size_t* clipped = nullptr) {
  if (kind == EstimatorKind::TrialOnly) return {trial_only(ds, arm), {}};
  auto in = detail::inputs_for(ds, kind, arm, nu);
  if (clipped) *clipped += in.clipped;
  return kernel::evaluate(kind, pop, in.view());
}

/// Estimates a single-arm or contrast target. Contrast influence curves are
/// the difference of the per-arm curves.
inline EstimateResult estimate(const ClusterDataset& ds, EstimatorKind kind, const EstimandTarget& target,
                               const FittedNuisance& nu, double level = 0.95) {
  if (!supports(kind, target.population))
    throw ConfigError(std::string(to_string(kind)) + " cannot estimate " + target.label());
  std::size_t clipped = 0;
  try {
    auto a = estimate_arm(ds, kind, target.population, target.arm, nu, &clipped);
    if (target.reference) {
      auto b = estimate_arm(ds, kind, target.population, *target.reference, nu, &clipped);
      a = kernel::difference(a, b);
    }
    return detail::finish(target, kind, std::move(a), clipped, &nu, level);
  } catch (const EstimationError& e) {
    throw EstimationError(target.label() + " (" + std::string(to_string(kind)) + "): " + e.what());
  }
}

inline EstimateResult ipw_psi(const ClusterDataset& ds, Arm arm, const FittedNuisance& nu) {
  return estimate(ds, EstimatorKind::Ipw, {Population::Entire, arm, std::nullopt}, nu);
}
inline EstimateResult aipw_psi(const ClusterDataset& ds, Arm arm, const FittedNuisance& nu) {
  return estimate(ds, EstimatorKind::Aipw, {Population::Entire, arm, std::nullopt}, nu);
}
inline EstimateResult iow_phi(const ClusterDataset& ds, Arm arm, const FittedNuisance& nu) {
  return estimate(ds, EstimatorKind::Iow, {Population::NonRandomized, arm, std::nullopt}, nu);
}
inline EstimateResult aiow_phi(const ClusterDataset& ds, Arm arm, const FittedNuisance& nu) {
  return estimate(ds, EstimatorKind::Aiow, {Population::NonRandomized, arm, std::nullopt}, nu);
}
inline EstimateResult aiow_phi_indicator(const ClusterDataset& ds, Arm arm, const FittedNuisance& nu) {
  return estimate(ds, EstimatorKind::AiowIndicator, {Population::NonRandomized, arm, std::nullopt}, nu);
}

inline EstimateResult contrast(const ClusterDataset& ds, std::pair<Arm, Arm> arms, EstimatorKind kind,
                               const FittedNuisance& nu, Population pop = Population::Entire) {
  if (arms.first == arms.second) throw ConfigError("contrast arms must differ");
  return estimate(ds, kind, {pop, arms.first, arms.second}, nu);
}

}  // namespace crtgen
