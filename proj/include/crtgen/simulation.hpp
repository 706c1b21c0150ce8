#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "crtgen/bootstrap.hpp"
#include "crtgen/data_model.hpp"
#include "crtgen/error.hpp"
#include "crtgen/estimators.hpp"
#include "crtgen/inference.hpp"
#include "crtgen/linear_models.hpp"
#include "crtgen/nuisance.hpp"
#include "crtgen/parallel.hpp"
#include "crtgen/random.hpp"

namespace crtgen::sim {

/// One column of the estimator grid. `name` labels report rows.
struct EstimatorSpec {
  std::string name;
  EstimatorKind kind = EstimatorKind::Aipw;
  OutcomeMode outcome = OutcomeMode::None;
  OutcomeFeatures features = OutcomeFeatures::Full;
  bool bootstrap = false;

  bool uses_probabilities() const noexcept {
    return kind != EstimatorKind::TrialOnly && kind != EstimatorKind::OutcomeOnly;
  }
  std::vector<Population> populations() const {
    std::vector<Population> out;
    for (auto p : {Population::Entire, Population::NonRandomized})
      if (supports(kind, p)) out.push_back(p);
    return out;
  }
};

/// Trial-only, IPW/IOW, AIPW/AIOW with cluster-level (1) and individual-level
/// (2) outcome models, the indicator comparator, and the misspecified
/// outcome-model experiment.
inline std::vector<EstimatorSpec> default_estimator_grid() {
  using K = EstimatorKind;
  using O = OutcomeMode;
  using F = OutcomeFeatures;
  return {
      {"trial_only", K::TrialOnly, O::None, F::Full, false},
      {"ipw", K::Ipw, O::None, F::Full, false},
      {"aipw1", K::Aipw, O::ClusterLevel, F::Full, true},
      {"aipw2", K::Aipw, O::IndividualLevel, F::Full, false},
      {"iow", K::Iow, O::None, F::Full, false},
      {"aiow1", K::Aiow, O::ClusterLevel, F::Full, true},
      {"aiow2", K::Aiow, O::IndividualLevel, F::Full, false},
      {"aiow1_indicator", K::AiowIndicator, O::ClusterLevel, F::Full, false},
      {"aipw_x_only", K::Aipw, O::ClusterLevel, F::DesignOnly, false},
      {"outcome_only_x_only", K::OutcomeOnly, O::ClusterLevel, F::DesignOnly, false},
      {"aipw_intercept_only", K::Aipw, O::ClusterLevel, F::InterceptOnly, false},
      {"outcome_only_intercept_only", K::OutcomeOnly, O::ClusterLevel, F::InterceptOnly, false},
  };
}

struct SimulationConfig {
  std::size_t m = 5000;
  double mean_cluster_size = 100.0;
  double pr_x1 = 0.05;
  std::vector<std::size_t> trial_sizes{50, 100, 250};
  double trial_x_share = 0.5;
  double treatment_prob = 0.5;
  std::size_t n_runs = 1000;
  std::size_t bootstrap_B = 250;
  OnDegenerate on_degenerate = OnDegenerate::Skip;
  std::uint64_t seed = 20240601;
  std::size_t oracle_runs = 200;
  std::vector<ProbabilityMode> modes{ProbabilityMode::Known, ProbabilityMode::EstimatedSimple,
                                     ProbabilityMode::EstimatedComplex};
  std::vector<ProbabilityMode> bootstrap_modes{ProbabilityMode::Known};
  std::vector<EstimatorSpec> estimators = default_estimator_grid();
  double level = 0.95;
  double max_failure_rate = 0.01;
  double probability_floor = 1e-6;
  unsigned threads = 1;

  void validate() const {
    auto open01 = [](double v) { return v > 0.0 && v < 1.0; };
    if (m < 2) throw ConfigError("simulation: m must be >= 2");
    if (!(mean_cluster_size > 0.0)) throw ConfigError("simulation: mean_cluster_size must be > 0");
    if (!open01(pr_x1)) throw ConfigError("simulation: pr_x1 must lie in (0,1)");
    if (!(trial_x_share >= 0.0 && trial_x_share <= 1.0)) throw ConfigError("simulation: trial_x_share must lie in [0,1]");
    if (!open01(treatment_prob)) throw ConfigError("simulation: treatment_prob must lie in (0,1)");
    if (trial_sizes.empty()) throw ConfigError("simulation: trial_sizes is empty");
    for (auto n : trial_sizes)
      if (n == 0 || n > m) throw ConfigError("simulation: trial size " + std::to_string(n) + " outside [1, m]");
    if (n_runs < 1) throw ConfigError("simulation: n_runs must be >= 1");
    if (oracle_runs < 1) throw ConfigError("simulation: oracle_runs must be >= 1");
    if (bootstrap_B < 1) throw ConfigError("simulation: bootstrap_B must be >= 1");
    if (!open01(level)) throw ConfigError("simulation: level must lie in (0,1)");
    if (modes.empty()) throw ConfigError("simulation: no probability modes");
    if (estimators.empty()) throw ConfigError("simulation: no estimators");
    std::set<std::string> names;
    for (const auto& e : estimators) {
      if (!names.insert(e.name).second) throw ConfigError("simulation: duplicate estimator name '" + e.name + "'");
      if (uses_outcome_model(e.kind) && e.outcome == OutcomeMode::None)
        throw ConfigError("simulation: estimator '" + e.name + "' needs an outcome mode");
      if (!uses_outcome_model(e.kind) && e.outcome != OutcomeMode::None)
        throw ConfigError("simulation: estimator '" + e.name + "' does not use an outcome model");
      if (e.outcome == OutcomeMode::IndividualLevel && e.features != OutcomeFeatures::Full)
        throw ConfigError("simulation: estimator '" + e.name + "': reduced features need the cluster-level model");
    }
  }
};

// ---------------------------------------------------------------------------
// Data-generating process

/// Cluster covariates and individual covariates of one synthetic cohort,
/// before sampling. `crn_key` seeds the per-individual outcome uniforms.
struct SimPopulation {
  std::vector<double> x;
  std::vector<Eigen::MatrixXd> w;          // N_j x 2
  std::vector<std::array<double, 2>> mu;   // latent covariate means
  std::uint64_t crn_key = 0;

  std::size_t size() const noexcept { return x.size(); }
};

inline SimPopulation generate_population(const SimulationConfig& cfg, Engine& rng) {
  std::poisson_distribution<int> size_dist(cfg.mean_cluster_size);
  std::bernoulli_distribution x_dist(cfg.pr_x1);
  std::uniform_real_distribution<double> mu_dist(-1.0, 1.0);
  std::normal_distribution<double> n01;
  SimPopulation pop;
  pop.crn_key = rng();
  pop.x.resize(cfg.m);
  pop.w.resize(cfg.m);
  pop.mu.resize(cfg.m);
  for (std::size_t j = 0; j < cfg.m; ++j) {
    int n = 0;
    while (n < 1) n = size_dist(rng);
    pop.x[j] = x_dist(rng) ? 1.0 : 0.0;
    pop.mu[j] = {mu_dist(rng), mu_dist(rng)};
    Eigen::MatrixXd w(n, 2);
    for (Eigen::Index i = 0; i < n; ++i) {
      w(i, 0) = pop.mu[j][0] + n01(rng);
      w(i, 1) = pop.mu[j][1] + n01(rng);
    }
    pop.w[j] = std::move(w);
  }
  return pop;
}

/// Sampling probabilities fixed by design, one per stratum of the binary
/// cluster covariate.
struct KnownDesign {
  std::array<double, 2> p_by_x{0.0, 0.0};
  double pr_selected = 0.0;  // trial_size / m
  double treatment_prob = 0.5;

  double p(double x) const { return p_by_x[x == 1.0 ? 1 : 0]; }
};

/// Pr[S=1 | X=x] = (n/m) / Pr^[X=x] * Pr[X=x | S=1], with Pr^[X=x] the
/// empirical share in the cohort.
inline KnownDesign compute_sampling_probabilities(const SimPopulation& pop, std::size_t trial_size,
                                                  double trial_x_share, double treatment_prob = 0.5) {
  const double m = static_cast<double>(pop.size());
  double n1 = 0.0;
  for (double x : pop.x) n1 += x;
  const std::array<double, 2> freq{(m - n1) / m, n1 / m};
  const std::array<double, 2> share{1.0 - trial_x_share, trial_x_share};
  KnownDesign d;
  d.pr_selected = static_cast<double>(trial_size) / m;
  d.treatment_prob = treatment_prob;
  std::string bad;
  for (int x : {1, 0}) {
    if (freq[x] == 0.0) {
      if (share[x] > 0.0) bad += (bad.empty() ? "" : "; ") + std::string("stratum X=") + std::to_string(x) + " is empty";
      continue;
    }
    d.p_by_x[x] = d.pr_selected / freq[x] * share[x];
    if (!(d.p_by_x[x] > 0.0 && d.p_by_x[x] <= 1.0))
      bad += (bad.empty() ? "" : "; ") + std::string("stratum X=") + std::to_string(x) + " has sampling probability " +
             csv::format_double(d.p_by_x[x]);
  }
  if (!bad.empty()) throw ConfigError("infeasible sampling design: " + bad + " (must lie in (0,1])");
  return d;
}

struct TrialAssignment {
  std::vector<std::uint8_t> selected;
  std::vector<Arm> arm;  // -1 for non-randomized clusters
  std::size_t trial_size() const {
    return static_cast<std::size_t>(std::count(selected.begin(), selected.end(), std::uint8_t{1}));
  }
};

/// Independent Bernoulli sampling with the design probabilities, then
/// Bernoulli treatment among sampled clusters.
inline TrialAssignment sample_trial_and_assign(const SimPopulation& pop, const KnownDesign& design, Engine& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  TrialAssignment t;
  t.selected.resize(pop.size());
  t.arm.assign(pop.size(), -1);
  for (std::size_t j = 0; j < pop.size(); ++j) {
    t.selected[j] = u01(rng) < design.p(pop.x[j]) ? 1 : 0;
    const double ua = u01(rng);
    if (t.selected[j]) t.arm[j] = ua < design.treatment_prob ? 1 : 0;
  }
  return t;
}

/// Linear predictor of the outcome model: (2a - 1)(x + 0.5 w1 + 0.5 w2).
inline double outcome_linear_predictor(double x, double w1, double w2, Arm a) {
  const double sign = a == 1 ? 1.0 : -1.0;
  return sign * x + 0.5 * sign * w1 + 0.5 * sign * w2;
}

/// Uniform shared by both potential outcomes of individual i in cluster j.
inline double common_uniform(const SimPopulation& pop, std::size_t j, Eigen::Index i) {
  const std::uint64_t h = stream_seed(pop.crn_key, {j, static_cast<std::uint64_t>(i)});
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

/// Outcome vector of cluster j under arm a. Both arms read the same
/// per-individual uniforms, so the observed vector is the potential vector of
/// the assigned arm.
inline std::vector<double> generate_outcomes(const SimPopulation& pop, std::size_t j, Arm a) {
  const auto& w = pop.w[j];
  std::vector<double> y(static_cast<std::size_t>(w.rows()));
  for (Eigen::Index i = 0; i < w.rows(); ++i)
    y[static_cast<std::size_t>(i)] =
        common_uniform(pop, j, i) < expit(outcome_linear_predictor(pop.x[j], w(i, 0), w(i, 1), a)) ? 1.0 : 0.0;
  return y;
}

struct PotentialOutcomes {
  std::vector<double> y1, y0;
  double ybar1 = 0.0, ybar0 = 0.0;
};

inline PotentialOutcomes potential_outcomes(const SimPopulation& pop, std::size_t j) {
  PotentialOutcomes po;
  po.y1 = generate_outcomes(pop, j, 1);
  po.y0 = generate_outcomes(pop, j, 0);
  const double n = static_cast<double>(po.y1.size());
  for (std::size_t i = 0; i < po.y1.size(); ++i) po.ybar1 += po.y1[i], po.ybar0 += po.y0[i];
  po.ybar1 /= n;
  po.ybar0 /= n;
  return po;
}

/// Observed dataset for one trial: design probabilities attached, outcomes
/// for randomized clusters only.
inline ClusterDataset build_dataset(const SimPopulation& pop, const KnownDesign& design, const TrialAssignment& t) {
  std::vector<ClusterRecord> recs;
  recs.reserve(pop.size());
  for (std::size_t j = 0; j < pop.size(); ++j) {
    const bool s = t.selected[j] != 0;
    std::optional<Arm> a;
    std::optional<std::vector<double>> y;
    if (s) {
      a = t.arm[j];
      y = generate_outcomes(pop, j, *a);
    }
    recs.emplace_back("c" + std::to_string(j), std::vector<double>{pop.x[j]}, pop.w[j], s, a, std::move(y),
                      design.p(pop.x[j]));
  }
  return ClusterDataset(std::move(recs), {0, 1}, {"x"}, {"w1", "w2"});
}

// ---------------------------------------------------------------------------
// True estimands

struct TruthValue {
  double value = 0.0;
  double mc_se = 0.0;
};

/// Truth table indexed by target label ("mean(1)", "ATE|S=0", ...). The S=0
/// truths depend on the trial size through the sampling design.
struct OracleTruth {
  std::map<std::string, TruthValue> entire;
  std::map<std::size_t, std::map<std::string, TruthValue>> non_randomized;

  const TruthValue& get(const EstimandTarget& t, std::size_t trial_size) const {
    const auto& table = t.population == Population::Entire ? entire : non_randomized.at(trial_size);
    return table.at(t.label());
  }
};

namespace detail {

inline TruthValue mean_and_se(const std::vector<double>& v) {
  TruthValue t;
  for (double x : v) t.value += x;
  t.value /= static_cast<double>(v.size());
  t.mc_se = v.size() >= 2 ? std::sqrt(sample_variance(v) / static_cast<double>(v.size())) : 0.0;
  return t;
}

inline const std::array<EstimandTarget, 3>& arm_targets(Population pop) {
  static const std::array<EstimandTarget, 3> entire{EstimandTarget{Population::Entire, 1, 0},
                                                    EstimandTarget{Population::Entire, 1, std::nullopt},
                                                    EstimandTarget{Population::Entire, 0, std::nullopt}};
  static const std::array<EstimandTarget, 3> s0{EstimandTarget{Population::NonRandomized, 1, 0},
                                                EstimandTarget{Population::NonRandomized, 1, std::nullopt},
                                                EstimandTarget{Population::NonRandomized, 0, std::nullopt}};
  return pop == Population::Entire ? entire : s0;
}

}  // namespace detail

/// Monte-Carlo truth: both potential outcomes for every individual of
/// `cfg.oracle_runs` fresh cohorts; psi averages cluster means over all
/// clusters, phi over clusters left out of a trial drawn with the design.
inline OracleTruth true_estimand_oracle(const SimulationConfig& cfg) {
  const std::size_t runs = cfg.oracle_runs;
  const std::size_t k = cfg.trial_sizes.size();
  // per oracle run: psi1, psi0, then (phi1, phi0) per trial size
  std::vector<std::vector<double>> per_run(runs);
  parallel_for(runs, cfg.threads, [&](std::size_t o) {
    auto rng = make_engine(cfg.seed, {streams::kOracle, o});
    auto pop = generate_population(cfg, rng);
    std::vector<double> y1(pop.size()), y0(pop.size());
    double psi1 = 0.0, psi0 = 0.0;
    for (std::size_t j = 0; j < pop.size(); ++j) {
      auto po = potential_outcomes(pop, j);
      y1[j] = po.ybar1;
      y0[j] = po.ybar0;
      psi1 += po.ybar1;
      psi0 += po.ybar0;
    }
    std::vector<double> out{psi1 / static_cast<double>(pop.size()), psi0 / static_cast<double>(pop.size())};
    for (std::size_t t = 0; t < k; ++t) {
      auto design = compute_sampling_probabilities(pop, cfg.trial_sizes[t], cfg.trial_x_share, cfg.treatment_prob);
      auto srng = make_engine(cfg.seed, {streams::kOracle, o, cfg.trial_sizes[t]});
      auto assign = sample_trial_and_assign(pop, design, srng);
      double s1 = 0.0, s0 = 0.0, n0 = 0.0;
      for (std::size_t j = 0; j < pop.size(); ++j)
        if (!assign.selected[j]) s1 += y1[j], s0 += y0[j], n0 += 1.0;
      out.push_back(n0 > 0 ? s1 / n0 : std::nan(""));
      out.push_back(n0 > 0 ? s0 / n0 : std::nan(""));
    }
    per_run[o] = std::move(out);
  });

  auto column = [&](std::size_t c, auto transform) {
    std::vector<double> v;
    v.reserve(runs);
    for (const auto& r : per_run) v.push_back(transform(r, c));
    return detail::mean_and_se(v);
  };
  auto single = [](const std::vector<double>& r, std::size_t c) { return r[c]; };
  auto diff = [](const std::vector<double>& r, std::size_t c) { return r[c] - r[c + 1]; };

  OracleTruth truth;
  truth.entire["mean(1)"] = column(0, single);
  truth.entire["mean(0)"] = column(1, single);
  truth.entire["ATE"] = column(0, diff);
  for (std::size_t t = 0; t < k; ++t) {
    auto& table = truth.non_randomized[cfg.trial_sizes[t]];
    const std::size_t c = 2 + 2 * t;
    table["mean(1)|S=0"] = column(c, single);
    table["mean(0)|S=0"] = column(c + 1, single);
    table["ATE|S=0"] = column(c, diff);
  }
  return truth;
}

// ---------------------------------------------------------------------------
// Metrics

/// Streaming summary of one report row. Estimates are summarized with
/// Welford updates; merge() combines two summaries (Chan et al.).
struct MetricAccumulator {
  std::size_t n = 0;
  double mean = 0.0;
  double m2 = 0.0;
  double sum_se_ic = 0.0;
  std::size_t n_se_ic = 0, cover_ic = 0;
  double sum_se_bs = 0.0;
  std::size_t n_se_bs = 0, cover_bs = 0;
  std::size_t failed = 0;
  std::size_t bootstrap_skipped = 0;

  void add(double estimate, std::optional<double> se_ic, std::optional<double> se_bs, double truth, double z) {
    ++n;
    const double d = estimate - mean;
    mean += d / static_cast<double>(n);
    m2 += d * (estimate - mean);
    const double err = std::abs(estimate - truth);
    if (se_ic) {
      sum_se_ic += *se_ic;
      ++n_se_ic;
      if (err <= z * *se_ic) ++cover_ic;
    }
    if (se_bs) {
      sum_se_bs += *se_bs;
      ++n_se_bs;
      if (err <= z * *se_bs) ++cover_bs;
    }
  }

  void merge(const MetricAccumulator& o) {
    if (o.n > 0) {
      const double total = static_cast<double>(n + o.n);
      const double d = o.mean - mean;
      m2 += o.m2 + d * d * static_cast<double>(n) * static_cast<double>(o.n) / total;
      mean += d * static_cast<double>(o.n) / total;
      n += o.n;
    }
    sum_se_ic += o.sum_se_ic;
    n_se_ic += o.n_se_ic;
    cover_ic += o.cover_ic;
    sum_se_bs += o.sum_se_bs;
    n_se_bs += o.n_se_bs;
    cover_bs += o.cover_bs;
    failed += o.failed;
    bootstrap_skipped += o.bootstrap_skipped;
  }
};

/// Identity of one report row.
struct RowKey {
  std::size_t trial_size = 0;
  std::string estimator;
  std::string mode;  // probability mode, or "none" for estimators that use no probabilities
  EstimandTarget target;
};

/// Enumerates report rows in a fixed order and maps (size, estimator, mode,
/// target) to a row index.
class RowLayout {
 public:
  explicit RowLayout(const SimulationConfig& cfg) : cfg_(&cfg) {
    for (std::size_t t = 0; t < cfg.trial_sizes.size(); ++t) {
      offsets_.emplace_back();
      for (const auto& spec : cfg.estimators) {
        offsets_.back().push_back(keys_.size());
        const auto modes = modes_for(spec);
        for (const auto& mode : modes)
          for (auto pop : spec.populations())
            for (const auto& target : detail::arm_targets(pop))
              keys_.push_back({cfg.trial_sizes[t], spec.name, mode, target});
      }
    }
  }

  std::vector<std::string> modes_for(const EstimatorSpec& spec) const {
    if (!spec.uses_probabilities()) return {"none"};
    std::vector<std::string> out;
    for (auto m : cfg_->modes) out.emplace_back(to_string(m));
    return out;
  }

  /// Row of (size index, estimator index, mode index, population index, target index).
  std::size_t index(std::size_t size_i, std::size_t spec_i, std::size_t mode_i, std::size_t pop_i,
                    std::size_t target_i) const {
    const auto npop = cfg_->estimators[spec_i].populations().size();
    return offsets_[size_i][spec_i] + (mode_i * npop + pop_i) * 3 + target_i;
  }

  const std::vector<RowKey>& keys() const noexcept { return keys_; }

 private:
  const SimulationConfig* cfg_;
  std::vector<RowKey> keys_;
  std::vector<std::vector<std::size_t>> offsets_;
};

/// Accumulated state of a block of runs; blocks merge associatively.
struct StudyAccumulator {
  std::vector<MetricAccumulator> rows;
  std::vector<std::size_t> dropped_runs;     // per trial size
  std::vector<std::size_t> realized_trial;   // per trial size, summed realized n
  std::vector<std::size_t> treated;          // per trial size, summed A=1 among S=1
  std::size_t runs = 0;

  StudyAccumulator() = default;
  StudyAccumulator(std::size_t n_rows, std::size_t n_sizes)
      : rows(n_rows), dropped_runs(n_sizes), realized_trial(n_sizes), treated(n_sizes) {}

  void merge(const StudyAccumulator& o) {
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i].merge(o.rows[i]);
    for (std::size_t i = 0; i < dropped_runs.size(); ++i) {
      dropped_runs[i] += o.dropped_runs[i];
      realized_trial[i] += o.realized_trial[i];
      treated[i] += o.treated[i];
    }
    runs += o.runs;
  }
};

struct ReportRow {
  RowKey key;
  double truth = 0.0;
  std::optional<double> scaled_bias, scaled_sd, scaled_ase_ic, scaled_ase_bootstrap, coverage_ic, coverage_bootstrap;
  std::size_t runs_used = 0;
  std::size_t runs_failed = 0;
  std::size_t bootstrap_skipped = 0;
};

struct SizeSummary {
  std::size_t trial_size = 0;
  std::size_t dropped_runs = 0;
  double mean_realized_trial_size = 0.0;
  double treated_share = 0.0;
};

struct SimulationReport {
  std::vector<ReportRow> rows;
  std::vector<SizeSummary> sizes;
  OracleTruth truth;
  std::size_t n_runs = 0;
  double scale = 1.0;
  double worst_failure_rate = 0.0;
  bool failed = false;

  const ReportRow* find(std::string_view estimand, std::size_t trial_size, std::string_view mode,
                        std::string_view estimator) const {
    for (const auto& r : rows)
      if (r.key.trial_size == trial_size && r.key.mode == mode && r.key.estimator == estimator &&
          r.key.target.label() == estimand)
        return &r;
    return nullptr;
  }
};

// ---------------------------------------------------------------------------
// Study harness

namespace detail {

struct OutcomeGroup {
  OutcomeMode mode;
  OutcomeFeatures features;
  friend auto operator<=>(const OutcomeGroup&, const OutcomeGroup&) = default;
};

inline NuisanceConfig nuisance_for(const SimulationConfig& cfg, ProbabilityMode mode, OutcomeMode outcome,
                                   OutcomeFeatures features) {
  NuisanceConfig nc;
  nc.sampling_mode = mode;
  nc.treatment_mode = mode;
  nc.outcome_mode = outcome;
  nc.features.outcome_features = features;
  nc.treatment_probabilities = {{0, 1.0 - cfg.treatment_prob}, {1, cfg.treatment_prob}};
  nc.probability_floor = cfg.probability_floor;
  return nc;
}

struct PointSe {
  double point = 0.0;
  std::optional<double> se;
};

inline PointSe summarize(const PointAndCurve& pc) {
  PointSe r{pc.point, std::nullopt};
  if (pc.ic.size() >= 2) r.se = std::sqrt(ic_variance(pc.ic));
  return r;
}

/// Per-arm results for targets (ATE, mean(1), mean(0)).
inline std::array<PointSe, 3> three_targets(const PointAndCurve& a1, const PointAndCurve& a0) {
  return {summarize(kernel::difference(a1, a0)), summarize(a1), summarize(a0)};
}

}  // namespace detail

/// Evaluates every estimator of the grid on one simulated trial and adds the
/// results to `acc`. Returns false when the trial is dropped.
inline bool evaluate_trial(const SimulationConfig& cfg, const RowLayout& layout, const OracleTruth& truth,
                           std::size_t size_i, const ClusterDataset& ds, std::uint64_t bootstrap_seed,
                           StudyAccumulator& acc) {
  const std::size_t n_size = cfg.trial_sizes[size_i];
  const double z = normal_quantile(1.0 - (1.0 - cfg.level) / 2.0);
  if (ds.count_arm(0) == 0 || ds.count_arm(1) == 0) {
    ++acc.dropped_runs[size_i];
    return false;
  }
  const std::size_t m = ds.size();

  // Outcome predictions do not depend on the probability mode.
  std::map<detail::OutcomeGroup, std::optional<std::array<std::vector<double>, 2>>> g_by_group;
  for (const auto& spec : cfg.estimators) {
    if (spec.outcome == OutcomeMode::None) continue;
    detail::OutcomeGroup key{spec.outcome, spec.features};
    if (g_by_group.contains(key)) continue;
    auto& slot = g_by_group[key];
    try {
      auto nc = detail::nuisance_for(cfg, ProbabilityMode::Known, spec.outcome, spec.features);
      std::array<std::vector<double>, 2> g;
      for (Arm a : {0, 1}) {
        auto model = fit_outcome_model(ds, a, nc);
        g[static_cast<std::size_t>(a)].resize(m);
        for (std::size_t j = 0; j < m; ++j) g[static_cast<std::size_t>(a)][j] = model.predict(ds[j]);
      }
      slot = std::move(g);
    } catch (const FitError&) {
    } catch (const EstimationError&) {
    }
  }

  auto record = [&](std::size_t row, const detail::PointSe& ps, std::optional<double> se_bs) {
    const auto& key = layout.keys()[row];
    acc.rows[row].add(ps.point, ps.se, se_bs, truth.get(key.target, n_size).value, z);
  };
  auto fail_rows = [&](std::size_t spec_i, std::size_t mode_i) {
    const auto npop = cfg.estimators[spec_i].populations().size();
    for (std::size_t p = 0; p < npop; ++p)
      for (std::size_t t = 0; t < 3; ++t) ++acc.rows[layout.index(size_i, spec_i, mode_i, p, t)].failed;
  };

  const std::vector<double> zeros(m, 0.0);

  // Estimators that use no probabilities.
  for (std::size_t s = 0; s < cfg.estimators.size(); ++s) {
    const auto& spec = cfg.estimators[s];
    if (spec.uses_probabilities()) continue;
    const auto pops = spec.populations();
    if (spec.kind == EstimatorKind::TrialOnly) {
      const double t1 = trial_only(ds, 1), t0 = trial_only(ds, 0);
      for (std::size_t p = 0; p < pops.size(); ++p) {
        record(layout.index(size_i, s, 0, p, 0), {t1 - t0, std::nullopt}, std::nullopt);
        record(layout.index(size_i, s, 0, p, 1), {t1, std::nullopt}, std::nullopt);
        record(layout.index(size_i, s, 0, p, 2), {t0, std::nullopt}, std::nullopt);
      }
      continue;
    }
    const auto& g = g_by_group[{spec.outcome, spec.features}];
    if (!g) {
      fail_rows(s, 0);
      continue;
    }
    std::vector<double> in_arm(m, 0.0), unselected(m), ones(m, 1.0);
    for (std::size_t j = 0; j < m; ++j) unselected[j] = ds[j].s() ? 0.0 : 1.0;
    for (std::size_t p = 0; p < pops.size(); ++p) {
      try {
        auto r1 = kernel::evaluate(spec.kind, pops[p], {in_arm, unselected, zeros, ones, ones, (*g)[1]});
        auto r0 = kernel::evaluate(spec.kind, pops[p], {in_arm, unselected, zeros, ones, ones, (*g)[0]});
        auto res = detail::three_targets(r1, r0);
        for (std::size_t t = 0; t < 3; ++t) record(layout.index(size_i, s, 0, p, t), res[t], std::nullopt);
      } catch (const EstimationError&) {
        for (std::size_t t = 0; t < 3; ++t) ++acc.rows[layout.index(size_i, s, 0, p, t)].failed;
      }
    }
  }

  // Weighting estimators, per probability mode.
  for (std::size_t mi = 0; mi < cfg.modes.size(); ++mi) {
    const auto mode = cfg.modes[mi];
    std::optional<std::array<ArmInputs, 2>> base;
    try {
      auto nc = detail::nuisance_for(cfg, mode, OutcomeMode::None, OutcomeFeatures::Full);
      FittedNuisance nu(fit_sampling_model(ds, nc), fit_treatment_model(ds, nc), {}, nc.probability_floor, false);
      base = std::array<ArmInputs, 2>{evaluate_arm(ds, nu, 0, false), evaluate_arm(ds, nu, 1, false)};
    } catch (const FitError&) {
    } catch (const EstimationError&) {
    }

    const bool boot = std::find(cfg.bootstrap_modes.begin(), cfg.bootstrap_modes.end(), mode) !=
                      cfg.bootstrap_modes.end();
    // bootstrap statistics: per flagged spec, per population, per target
    std::vector<std::size_t> boot_specs;
    if (boot && base)
      for (std::size_t s = 0; s < cfg.estimators.size(); ++s)
        if (cfg.estimators[s].bootstrap && cfg.estimators[s].uses_probabilities()) boot_specs.push_back(s);
    std::vector<std::optional<double>> boot_se;
    std::size_t boot_skipped = 0;
    if (!boot_specs.empty()) {
      std::size_t n_stats = 0;
      for (auto s : boot_specs) n_stats += cfg.estimators[s].populations().size() * 3;
      BootstrapConfig bc;
      bc.replicates = cfg.bootstrap_B;
      bc.seed = stream_seed(bootstrap_seed, {mi});
      bc.on_degenerate = cfg.on_degenerate;
      bc.threads = 1;
      try {
        auto res = bootstrap_statistics(ds, n_stats, bc, [&](const ClusterDataset& b) {
          std::vector<double> out;
          out.reserve(n_stats);
          std::map<detail::OutcomeGroup, FittedNuisance> fits;
          for (auto s : boot_specs) {
            const auto& spec = cfg.estimators[s];
            detail::OutcomeGroup key{spec.outcome, spec.features};
            auto it = fits.find(key);
            if (it == fits.end())
              it = fits.emplace(key, fit_nuisance(b, detail::nuisance_for(cfg, mode, spec.outcome, spec.features)))
                       .first;
            for (auto pop : spec.populations()) {
              const double a1 = estimate_arm(b, spec.kind, pop, 1, it->second).point;
              const double a0 = estimate_arm(b, spec.kind, pop, 0, it->second).point;
              out.insert(out.end(), {a1 - a0, a1, a0});
            }
          }
          return out;
        });
        for (auto& r : res) boot_se.push_back(r.se);
        boot_skipped = res.empty() ? 0 : res.front().skipped;
      } catch (const EstimationError&) {
        boot_se.assign(n_stats, std::nullopt);
        boot_skipped = cfg.bootstrap_B;
      }
    }

    std::size_t boot_pos = 0;
    for (std::size_t s = 0; s < cfg.estimators.size(); ++s) {
      const auto& spec = cfg.estimators[s];
      if (!spec.uses_probabilities()) continue;
      const bool has_boot = std::find(boot_specs.begin(), boot_specs.end(), s) != boot_specs.end();
      const auto pops = spec.populations();
      const std::vector<double>* g1 = &zeros;
      const std::vector<double>* g0 = &zeros;
      if (spec.outcome != OutcomeMode::None) {
        const auto& g = g_by_group[{spec.outcome, spec.features}];
        if (!g) {
          fail_rows(s, mi);
          if (has_boot) boot_pos += pops.size() * 3;
          continue;
        }
        g1 = &(*g)[1];
        g0 = &(*g)[0];
      }
      if (!base) {
        fail_rows(s, mi);
        if (has_boot) boot_pos += pops.size() * 3;
        continue;
      }
      const auto& b1 = (*base)[1];
      const auto& b0 = (*base)[0];
      for (std::size_t p = 0; p < pops.size(); ++p) {
        try {
          auto r1 = kernel::evaluate(spec.kind, pops[p], {b1.in_arm, b1.unselected, b1.ybar, b1.p, b1.e, *g1});
          auto r0 = kernel::evaluate(spec.kind, pops[p], {b0.in_arm, b0.unselected, b0.ybar, b0.p, b0.e, *g0});
          auto res = detail::three_targets(r1, r0);
          for (std::size_t t = 0; t < 3; ++t) {
            const auto row = layout.index(size_i, s, mi, p, t);
            std::optional<double> se_bs;
            if (has_boot) {
              se_bs = boot_se[boot_pos + p * 3 + t];
              acc.rows[row].bootstrap_skipped += boot_skipped;
            }
            record(row, res[t], se_bs);
          }
        } catch (const EstimationError&) {
          for (std::size_t t = 0; t < 3; ++t) ++acc.rows[layout.index(size_i, s, mi, p, t)].failed;
        }
      }
      if (has_boot) boot_pos += pops.size() * 3;
    }
  }
  return true;
}

/// One replication: a fresh cohort shared by every trial size, then a trial
/// per size drawn from its own stream.
inline void simulate_run(const SimulationConfig& cfg, const RowLayout& layout, const OracleTruth& truth,
                         std::size_t run, StudyAccumulator& acc) {
  auto prng = make_engine(cfg.seed, {streams::kPopulation, run});
  auto pop = generate_population(cfg, prng);
  for (std::size_t t = 0; t < cfg.trial_sizes.size(); ++t) {
    const std::size_t n = cfg.trial_sizes[t];
    auto design = compute_sampling_probabilities(pop, n, cfg.trial_x_share, cfg.treatment_prob);
    auto srng = make_engine(cfg.seed, {streams::kSampling, n, run});
    auto assign = sample_trial_and_assign(pop, design, srng);
    acc.realized_trial[t] += assign.trial_size();
    for (Arm a : assign.arm) acc.treated[t] += a == 1 ? 1 : 0;
    auto ds = build_dataset(pop, design, assign);
    evaluate_trial(cfg, layout, truth, t, ds, stream_seed(cfg.seed, {streams::kBootstrap, n, run}), acc);
  }
  ++acc.runs;
}

/// Runs [first, first + count) in order into one accumulator.
inline StudyAccumulator run_block(const SimulationConfig& cfg, const RowLayout& layout, const OracleTruth& truth,
                                  std::size_t first, std::size_t count) {
  StudyAccumulator acc(layout.keys().size(), cfg.trial_sizes.size());
  for (std::size_t r = first; r < first + count; ++r) simulate_run(cfg, layout, truth, r, acc);
  return acc;
}

inline SimulationReport finalize(const SimulationConfig& cfg, const RowLayout& layout, const OracleTruth& truth,
                                 const StudyAccumulator& acc) {
  SimulationReport rep;
  rep.truth = truth;
  rep.n_runs = acc.runs;
  rep.scale = std::sqrt(static_cast<double>(cfg.m));
  for (std::size_t i = 0; i < layout.keys().size(); ++i) {
    const auto& a = acc.rows[i];
    ReportRow row;
    row.key = layout.keys()[i];
    row.truth = truth.get(row.key.target, row.key.trial_size).value;
    row.runs_used = a.n;
    row.runs_failed = a.failed;
    row.bootstrap_skipped = a.bootstrap_skipped;
    if (a.n >= 1) row.scaled_bias = (a.mean - row.truth) * rep.scale;
    if (a.n >= 2) row.scaled_sd = std::sqrt(a.m2 / static_cast<double>(a.n - 1)) * rep.scale;
    if (a.n_se_ic > 0) {
      row.scaled_ase_ic = a.sum_se_ic / static_cast<double>(a.n_se_ic) * rep.scale;
      row.coverage_ic = static_cast<double>(a.cover_ic) / static_cast<double>(a.n_se_ic);
    }
    if (a.n_se_bs > 0) {
      row.scaled_ase_bootstrap = a.sum_se_bs / static_cast<double>(a.n_se_bs) * rep.scale;
      row.coverage_bootstrap = static_cast<double>(a.cover_bs) / static_cast<double>(a.n_se_bs);
    }
    if (acc.runs > 0)
      rep.worst_failure_rate =
          std::max(rep.worst_failure_rate, static_cast<double>(a.failed) / static_cast<double>(acc.runs));
    rep.rows.push_back(std::move(row));
  }
  for (std::size_t t = 0; t < cfg.trial_sizes.size(); ++t) {
    SizeSummary s;
    s.trial_size = cfg.trial_sizes[t];
    s.dropped_runs = acc.dropped_runs[t];
    if (acc.runs > 0) {
      s.mean_realized_trial_size = static_cast<double>(acc.realized_trial[t]) / static_cast<double>(acc.runs);
      rep.worst_failure_rate =
          std::max(rep.worst_failure_rate, static_cast<double>(s.dropped_runs) / static_cast<double>(acc.runs));
    }
    if (acc.realized_trial[t] > 0)
      s.treated_share = static_cast<double>(acc.treated[t]) / static_cast<double>(acc.realized_trial[t]);
    rep.sizes.push_back(s);
  }
  rep.failed = rep.worst_failure_rate > cfg.max_failure_rate;
  return rep;
}

/// Runs per block. Fixed, so the merge tree and hence every floating-point
/// result is the same for any thread count.
inline constexpr std::size_t kRunsPerBlock = 4;

inline SimulationReport run_study(const SimulationConfig& cfg, const OracleTruth& truth) {
  cfg.validate();
  RowLayout layout(cfg);
  const std::size_t blocks = (cfg.n_runs + kRunsPerBlock - 1) / kRunsPerBlock;
  std::vector<StudyAccumulator> parts(blocks);
  parallel_for(blocks, cfg.threads, [&](std::size_t b) {
    const std::size_t first = b * kRunsPerBlock;
    parts[b] = run_block(cfg, layout, truth, first, std::min(kRunsPerBlock, cfg.n_runs - first));
  });
  StudyAccumulator total(layout.keys().size(), cfg.trial_sizes.size());
  for (const auto& p : parts) total.merge(p);
  return finalize(cfg, layout, truth, total);
}

inline SimulationReport run_study(const SimulationConfig& cfg) {
  cfg.validate();
  return run_study(cfg, true_estimand_oracle(cfg));
}

}  // namespace crtgen::sim
