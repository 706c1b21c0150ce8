#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "crtgen/data_model.hpp"
#include "crtgen/error.hpp"
#include "crtgen/linear_models.hpp"

namespace crtgen {

enum class ProbabilityMode { Known, EstimatedSimple, EstimatedComplex };
/// Zero is the identically-zero outcome model, which turns each augmented
/// estimator into its non-augmented special case.
enum class OutcomeMode { None, ClusterLevel, IndividualLevel, Zero };

/// Which covariates enter the cluster-level outcome regression. DesignOnly
/// drops the individual-covariate summaries (intercept + design covariates);
/// InterceptOnly keeps the intercept alone.
enum class OutcomeFeatures { Full, DesignOnly, InterceptOnly };

inline std::string_view to_string(ProbabilityMode m) {
  switch (m) {
    case ProbabilityMode::Known: return "known";
    case ProbabilityMode::EstimatedSimple: return "simple";
    case ProbabilityMode::EstimatedComplex: return "complex";
  }
  return "?";
}
inline std::string_view to_string(OutcomeMode m) {
  switch (m) {
    case OutcomeMode::None: return "none";
    case OutcomeMode::ClusterLevel: return "cluster";
    case OutcomeMode::IndividualLevel: return "individual";
    case OutcomeMode::Zero: return "zero";
  }
  return "?";
}
inline std::string_view to_string(OutcomeFeatures f) {
  switch (f) {
    case OutcomeFeatures::Full: return "full";
    case OutcomeFeatures::DesignOnly: return "design_only";
    case OutcomeFeatures::InterceptOnly: return "intercept_only";
  }
  return "?";
}

inline ProbabilityMode parse_probability_mode(std::string_view s) {
  if (s == "known") return ProbabilityMode::Known;
  if (s == "simple") return ProbabilityMode::EstimatedSimple;
  if (s == "complex") return ProbabilityMode::EstimatedComplex;
  throw ConfigError("unknown probability mode '" + std::string(s) + "' (expected known|simple|complex)");
}
inline OutcomeMode parse_outcome_mode(std::string_view s) {
  if (s == "none") return OutcomeMode::None;
  if (s == "cluster") return OutcomeMode::ClusterLevel;
  if (s == "individual") return OutcomeMode::IndividualLevel;
  if (s == "zero") return OutcomeMode::Zero;
  throw ConfigError("unknown outcome mode '" + std::string(s) + "' (expected none|cluster|individual|zero)");
}
inline OutcomeFeatures parse_outcome_features(std::string_view s) {
  if (s == "full") return OutcomeFeatures::Full;
  if (s == "design_only") return OutcomeFeatures::DesignOnly;
  if (s == "intercept_only") return OutcomeFeatures::InterceptOnly;
  throw ConfigError("unknown outcome feature set '" + std::string(s) + "' (expected full|design_only|intercept_only)");
}

struct FeatureSpec {
  std::vector<std::size_t> design_columns;  // indices into x; empty selects every column
  OutcomeFeatures outcome_features = OutcomeFeatures::Full;
};

struct NuisanceConfig {
  ProbabilityMode sampling_mode = ProbabilityMode::EstimatedSimple;
  ProbabilityMode treatment_mode = ProbabilityMode::EstimatedSimple;
  OutcomeMode outcome_mode = OutcomeMode::ClusterLevel;
  FeatureSpec features;
  std::map<Arm, double> treatment_probabilities;  // used by Known treatment mode
  double probability_floor = 1e-6;
  bool strict_positivity = false;
  LogisticOptions logistic;
};

struct ModelDiagnostics {
  std::string model;
  int iterations = 0;
  double deviance = 0.0;
};

// ---------------------------------------------------------------------------
// Feature construction

namespace features {

inline std::vector<std::size_t> design_columns(const ClusterDataset& ds, const FeatureSpec& spec) {
  if (!spec.design_columns.empty()) {
    for (auto k : spec.design_columns)
      if (k >= ds.x_dim()) throw ConfigError("design column index " + std::to_string(k) + " out of range");
    return spec.design_columns;
  }
  std::vector<std::size_t> all(ds.x_dim());
  for (std::size_t k = 0; k < all.size(); ++k) all[k] = k;
  return all;
}

/// [1, selected x, (w column means)]
inline Eigen::VectorXd cluster_row(const ClusterRecord& r, std::span<const std::size_t> cols, bool with_w_means) {
  const auto pw = with_w_means ? r.w_means().size() : 0;
  Eigen::VectorXd v(static_cast<Eigen::Index>(1 + cols.size() + pw));
  Eigen::Index c = 0;
  v[c++] = 1.0;
  for (auto k : cols) v[c++] = r.x()[k];
  for (std::size_t k = 0; k < pw; ++k) v[c++] = r.w_means()[k];
  return v;
}

template <class Pred>
Eigen::MatrixXd cluster_matrix(const ClusterDataset& ds, std::span<const std::size_t> cols, bool with_w_means,
                               Pred&& keep) {
  std::vector<std::size_t> rows;
  for (std::size_t j = 0; j < ds.size(); ++j)
    if (keep(ds[j])) rows.push_back(j);
  const Eigen::Index k = static_cast<Eigen::Index>(1 + cols.size() + (with_w_means ? ds.w_dim() : 0));
  Eigen::MatrixXd X(static_cast<Eigen::Index>(rows.size()), k);
  for (std::size_t i = 0; i < rows.size(); ++i)
    X.row(static_cast<Eigen::Index>(i)) = cluster_row(ds[rows[i]], cols, with_w_means).transpose();
  return X;
}

}  // namespace features

// ---------------------------------------------------------------------------
// Sampling model p(X, W) = Pr[S = 1 | X, W]

class SamplingModel {
 public:
  SamplingModel() = default;
  static SamplingModel known() {
    SamplingModel m;
    m.mode_ = ProbabilityMode::Known;
    return m;
  }
  static SamplingModel estimated(ProbabilityMode mode, std::vector<std::size_t> cols, LogisticFit fit) {
    SamplingModel m;
    m.mode_ = mode;
    m.cols_ = std::move(cols);
    m.fit_ = std::move(fit);
    return m;
  }

  ProbabilityMode mode() const noexcept { return mode_; }
  const std::optional<LogisticFit>& fit() const noexcept { return fit_; }

  /// Probability before the positivity guard.
  double raw(const ClusterRecord& r) const {
    if (mode_ == ProbabilityMode::Known) {
      if (!r.design_p()) throw ConfigError("known sampling mode: cluster " + r.id() + " carries no design probability");
      return *r.design_p();
    }
    return fit_->predict(features::cluster_row(r, cols_, mode_ == ProbabilityMode::EstimatedComplex));
  }

 private:
  ProbabilityMode mode_ = ProbabilityMode::Known;
  std::vector<std::size_t> cols_;
  std::optional<LogisticFit> fit_;
};

/// Regresses S on design covariates (simple) or design covariates plus the
/// per-cluster means of every individual covariate (complex), over all
/// clusters. Known mode passes design probabilities through.
inline SamplingModel fit_sampling_model(const ClusterDataset& ds, const NuisanceConfig& cfg) {
  if (cfg.sampling_mode == ProbabilityMode::Known) {
    for (const auto& r : ds.records())
      if (!r.design_p()) throw ConfigError("known sampling mode requires design probabilities (cluster " + r.id() + ")");
    return SamplingModel::known();
  }
  auto cols = features::design_columns(ds, cfg.features);
  const bool complex = cfg.sampling_mode == ProbabilityMode::EstimatedComplex;
  Eigen::MatrixXd X = features::cluster_matrix(ds, cols, complex, [](const auto&) { return true; });
  Eigen::VectorXd s(static_cast<Eigen::Index>(ds.size()));
  for (std::size_t j = 0; j < ds.size(); ++j) s[static_cast<Eigen::Index>(j)] = ds[j].s() ? 1.0 : 0.0;
  auto fit = fit_logistic(X, s, cfg.logistic, "sampling model");
  return SamplingModel::estimated(cfg.sampling_mode, std::move(cols), std::move(fit));
}

// ---------------------------------------------------------------------------
// Treatment model e_a(X, W) = Pr[A = a | X, W, S = 1]

class TreatmentModel {
 public:
  TreatmentModel() = default;
  static TreatmentModel known(std::map<Arm, double> probs) {
    TreatmentModel m;
    m.mode_ = ProbabilityMode::Known;
    m.known_ = std::move(probs);
    return m;
  }
  static TreatmentModel estimated(ProbabilityMode mode, std::vector<std::size_t> cols, std::vector<Arm> levels,
                                  std::vector<LogisticFit> fits) {
    TreatmentModel m;
    m.mode_ = mode;
    m.cols_ = std::move(cols);
    m.levels_ = std::move(levels);
    m.fits_ = std::move(fits);
    return m;
  }

  ProbabilityMode mode() const noexcept { return mode_; }
  const std::vector<LogisticFit>& fits() const noexcept { return fits_; }

  double raw(const ClusterRecord& r, Arm arm) const {
    if (mode_ == ProbabilityMode::Known) {
      auto it = known_.find(arm);
      if (it == known_.end()) throw ConfigError("known treatment mode: no probability for arm " + std::to_string(arm));
      return it->second;
    }
    auto pos = std::find(levels_.begin(), levels_.end(), arm);
    if (pos == levels_.end()) throw EstimationError("treatment model: unknown arm " + std::to_string(arm));
    const auto idx = static_cast<std::size_t>(pos - levels_.begin());
    const Eigen::VectorXd f = features::cluster_row(r, cols_, mode_ == ProbabilityMode::EstimatedComplex);
    if (levels_.size() == 2) {
      const double p1 = fits_.front().predict(f);
      return idx == 1 ? p1 : 1.0 - p1;
    }
    // one-vs-rest fits renormalized over the arms
    double total = 0.0, mine = 0.0;
    for (std::size_t k = 0; k < fits_.size(); ++k) {
      const double v = fits_[k].predict(f);
      total += v;
      if (k == idx) mine = v;
    }
    return mine / total;
  }

 private:
  ProbabilityMode mode_ = ProbabilityMode::Known;
  std::map<Arm, double> known_;
  std::vector<std::size_t> cols_;
  std::vector<Arm> levels_;
  std::vector<LogisticFit> fits_;
};

/// Fits Pr[A = a | X, W, S = 1] on randomized clusters only. With two arms a
/// single logistic model for the larger label is fit and the other arm gets
/// the complement; with more arms one-vs-rest fits are renormalized.
inline TreatmentModel fit_treatment_model(const ClusterDataset& ds, const NuisanceConfig& cfg) {
  if (cfg.treatment_mode == ProbabilityMode::Known) {
    if (cfg.treatment_probabilities.empty()) throw ConfigError("known treatment mode requires treatment_probabilities");
    for (const auto& [arm, pr] : cfg.treatment_probabilities)
      if (!(pr >= 0.0 && pr <= 1.0)) throw ConfigError("treatment probability for arm " + std::to_string(arm) + " outside [0,1]");
    return TreatmentModel::known(cfg.treatment_probabilities);
  }
  std::vector<Arm> levels;
  for (Arm a : ds.treatment_levels())
    if (ds.count_arm(a) > 0) levels.push_back(a);
  if (levels.size() < 2) throw EstimationError("treatment model: fewer than 2 distinct treatment values among randomized clusters");
  auto cols = features::design_columns(ds, cfg.features);
  const bool complex = cfg.treatment_mode == ProbabilityMode::EstimatedComplex;
  Eigen::MatrixXd X = features::cluster_matrix(ds, cols, complex, [](const auto& r) { return r.s(); });
  std::vector<Arm> arms;
  for (const auto& r : ds.records())
    if (r.s()) arms.push_back(*r.a());
  auto fit_for = [&](Arm target) {
    Eigen::VectorXd y(static_cast<Eigen::Index>(arms.size()));
    for (std::size_t i = 0; i < arms.size(); ++i) y[static_cast<Eigen::Index>(i)] = arms[i] == target ? 1.0 : 0.0;
    return fit_logistic(X, y, cfg.logistic, "treatment model");
  };
  std::vector<LogisticFit> fits;
  if (levels.size() == 2) {
    fits.push_back(fit_for(levels[1]));
  } else {
    for (Arm a : levels) fits.push_back(fit_for(a));
  }
  return TreatmentModel::estimated(cfg.treatment_mode, std::move(cols), std::move(levels), std::move(fits));
}

// ---------------------------------------------------------------------------
// Outcome model g_a(X, W) = E[Ybar | X, W, S = 1, A = a], one arm

class OutcomeModel {
 public:
  enum class Link { Identity, Logit };

  OutcomeModel(Arm arm, OutcomeMode mode, std::vector<std::size_t> cols, bool with_w, Link link, Eigen::VectorXd coef,
               ModelDiagnostics diag)
      : arm_(arm), mode_(mode), cols_(std::move(cols)), with_w_(with_w), link_(link), coef_(std::move(coef)),
        diag_(std::move(diag)) {}

  Arm arm() const noexcept { return arm_; }
  OutcomeMode mode() const noexcept { return mode_; }
  Link link() const noexcept { return link_; }
  const Eigen::VectorXd& coef() const noexcept { return coef_; }
  const ModelDiagnostics& diagnostics() const noexcept { return diag_; }

  /// Individual-level prediction h_a(X_j, W_{j,i}).
  double predict_individual(const ClusterRecord& r, Eigen::Index i) const {
    double eta = coef_[0];
    Eigen::Index c = 1;
    for (auto k : cols_) eta += coef_[c++] * r.x()[k];
    for (Eigen::Index k = 0; k < r.w().cols(); ++k) eta += coef_[c++] * r.w()(i, k);
    return link_ == Link::Logit ? expit(eta) : eta;
  }

  /// Cluster-level prediction; depends only on covariates.
  double predict(const ClusterRecord& r) const {
    if (mode_ == OutcomeMode::Zero) return 0.0;
    if (mode_ == OutcomeMode::ClusterLevel) {
      double v = coef_[0];
      Eigen::Index c = 1;
      for (auto k : cols_) v += coef_[c++] * r.x()[k];
      if (with_w_)
        for (double m : r.w_means()) v += coef_[c++] * m;
      return v;
    }
    double sum = 0.0;
    for (Eigen::Index i = 0; i < r.w().rows(); ++i) sum += predict_individual(r, i);
    return sum / static_cast<double>(r.w().rows());
  }

 private:
  Arm arm_;
  OutcomeMode mode_;
  std::vector<std::size_t> cols_;
  bool with_w_;
  Link link_;
  Eigen::VectorXd coef_;
  ModelDiagnostics diag_;
};

/// Fits the outcome regression for one arm on randomized clusters in that
/// arm. Cluster level: OLS of Ybar_j on [1, x, w means]. Individual level:
/// logistic (binary outcomes) or OLS of Y_{j,i} on [1, x_j, w_{j,i}].
inline OutcomeModel fit_outcome_model(const ClusterDataset& ds, Arm arm, const NuisanceConfig& cfg) {
  if (cfg.outcome_mode == OutcomeMode::None) throw ConfigError("outcome model requested with outcome mode none");
  const std::size_t n_arm = ds.count_arm(arm);
  if (n_arm == 0) throw EstimationError("outcome model: zero randomized clusters in arm " + std::to_string(arm));
  auto cols = features::design_columns(ds, cfg.features);
  const std::string what = "outcome model (arm " + std::to_string(arm) + ")";
  if (cfg.outcome_mode == OutcomeMode::Zero)
    return OutcomeModel(arm, OutcomeMode::Zero, {}, false, OutcomeModel::Link::Identity, Eigen::VectorXd::Zero(1),
                        {what + ", identically zero", 0, 0.0});

  if (cfg.outcome_mode == OutcomeMode::ClusterLevel) {
    const bool with_w = cfg.features.outcome_features == OutcomeFeatures::Full;
    if (cfg.features.outcome_features == OutcomeFeatures::InterceptOnly) cols.clear();
    Eigen::MatrixXd X = features::cluster_matrix(ds, cols, with_w, [arm](const auto& r) { return r.in_arm(arm); });
    Eigen::VectorXd y(X.rows());
    Eigen::Index i = 0;
    for (const auto& r : ds.records())
      if (r.in_arm(arm)) y[i++] = r.ybar_or_zero();
    LinearFit fit;
    try {
      fit = fit_linear(X, y);
    } catch (const FitError& e) {
      throw FitError(e.kind(), what);
    }
    return OutcomeModel(arm, OutcomeMode::ClusterLevel, std::move(cols), with_w, OutcomeModel::Link::Identity,
                        std::move(fit.coef), {what, 0, 0.0});
  }

  Eigen::Index total = 0;
  bool binary = true;
  for (const auto& r : ds.records())
    if (r.in_arm(arm)) {
      total += r.w().rows();
      for (double v : *r.y()) binary = binary && (v == 0.0 || v == 1.0);
    }
  const Eigen::Index k = static_cast<Eigen::Index>(1 + cols.size() + ds.w_dim());
  Eigen::MatrixXd X(total, k);
  Eigen::VectorXd y(total);
  Eigen::Index row = 0;
  for (const auto& r : ds.records()) {
    if (!r.in_arm(arm)) continue;
    for (Eigen::Index i = 0; i < r.w().rows(); ++i, ++row) {
      Eigen::Index c = 0;
      X(row, c++) = 1.0;
      for (auto kx : cols) X(row, c++) = r.x()[kx];
      for (Eigen::Index kw = 0; kw < r.w().cols(); ++kw) X(row, c++) = r.w()(i, kw);
      y[row] = (*r.y())[static_cast<std::size_t>(i)];
    }
  }
  if (binary) {
    auto fit = fit_logistic(X, y, cfg.logistic, what);
    return OutcomeModel(arm, OutcomeMode::IndividualLevel, std::move(cols), true, OutcomeModel::Link::Logit,
                        std::move(fit.coef), {what, fit.iterations, fit.deviance});
  }
  LinearFit fit;
  try {
    fit = fit_linear(X, y);
  } catch (const FitError& e) {
    throw FitError(e.kind(), what);
  }
  return OutcomeModel(arm, OutcomeMode::IndividualLevel, std::move(cols), true, OutcomeModel::Link::Identity,
                      std::move(fit.coef), {what, 0, 0.0});
}

// ---------------------------------------------------------------------------

/// The three fitted nuisance functions. Probabilities pass through the
/// positivity guard, clipping into [floor, 1 - floor].
class FittedNuisance {
 public:
  FittedNuisance(SamplingModel sampling, TreatmentModel treatment, std::vector<OutcomeModel> outcomes,
                 double floor = 1e-6, bool strict = false)
      : sampling_(std::move(sampling)), treatment_(std::move(treatment)), outcomes_(std::move(outcomes)),
        floor_(floor), strict_(strict) {}

  const SamplingModel& sampling() const noexcept { return sampling_; }
  const TreatmentModel& treatment() const noexcept { return treatment_; }
  const std::vector<OutcomeModel>& outcomes() const noexcept { return outcomes_; }
  double floor() const noexcept { return floor_; }
  bool strict() const noexcept { return strict_; }

  double clip(double p) const noexcept { return std::clamp(p, floor_, 1.0 - floor_); }
  double p_hat(const ClusterRecord& r) const { return clip(sampling_.raw(r)); }
  double e_hat(const ClusterRecord& r, Arm arm) const { return clip(treatment_.raw(r, arm)); }

  bool has_outcome(Arm arm) const { return find(arm) != nullptr; }
  bool has_outcome() const noexcept { return !outcomes_.empty(); }
  double g_hat(const ClusterRecord& r, Arm arm) const {
    const auto* m = find(arm);
    if (!m) throw EstimationError("no outcome model for arm " + std::to_string(arm));
    return m->predict(r);
  }

  std::vector<ModelDiagnostics> diagnostics() const {
    std::vector<ModelDiagnostics> out;
    if (const auto& f = sampling_.fit()) out.push_back({"sampling model", f->iterations, f->deviance});
    for (const auto& f : treatment_.fits()) out.push_back({"treatment model", f.iterations, f.deviance});
    for (const auto& o : outcomes_) out.push_back(o.diagnostics());
    return out;
  }

 private:
  const OutcomeModel* find(Arm arm) const {
    for (const auto& o : outcomes_)
      if (o.arm() == arm) return &o;
    return nullptr;
  }

  SamplingModel sampling_;
  TreatmentModel treatment_;
  std::vector<OutcomeModel> outcomes_;
  double floor_;
  bool strict_;
};

/// Fits every nuisance model the configuration asks for; outcome models are
/// fit separately for each treatment level present among randomized clusters.
inline FittedNuisance fit_nuisance(const ClusterDataset& ds, const NuisanceConfig& cfg) {
  auto sampling = fit_sampling_model(ds, cfg);
  auto treatment = fit_treatment_model(ds, cfg);
  std::vector<OutcomeModel> outcomes;
  if (cfg.outcome_mode != OutcomeMode::None)
    for (Arm a : ds.treatment_levels()) outcomes.push_back(fit_outcome_model(ds, a, cfg));
  return FittedNuisance(std::move(sampling), std::move(treatment), std::move(outcomes), cfg.probability_floor,
                        cfg.strict_positivity);
}

// ---------------------------------------------------------------------------
// Per-arm evaluated inputs consumed by the estimators

struct ArmView {
  std::span<const double> in_arm;      // I(S_j = 1, A_j = a)
  std::span<const double> unselected;  // I(S_j = 0)
  std::span<const double> ybar;        // cluster-average outcome, 0 when absent
  std::span<const double> p;           // p_hat
  std::span<const double> e;           // e_hat for arm a
  std::span<const double> g;           // g_hat for arm a (zeros without an outcome model)
};

struct ArmInputs {
  Arm arm = 0;
  std::vector<double> in_arm, unselected, ybar, p, e, g;
  bool has_g = false;
  std::size_t clipped = 0;  // probabilities moved by the positivity guard where the indicator is 1

  ArmView view() const { return {in_arm, unselected, ybar, p, e, g}; }
};

/// Evaluates p_hat, e_hat and (optionally) g_hat for every cluster.
inline ArmInputs evaluate_arm(const ClusterDataset& ds, const FittedNuisance& nu, Arm arm, bool with_outcome) {
  const std::size_t m = ds.size();
  ArmInputs in;
  in.arm = arm;
  in.in_arm.resize(m);
  in.unselected.resize(m);
  in.ybar.resize(m);
  in.p.resize(m);
  in.e.resize(m);
  in.g.assign(m, 0.0);
  in.has_g = with_outcome;
  for (std::size_t j = 0; j < m; ++j) {
    const auto& r = ds[j];
    const bool ind = r.in_arm(arm);
    in.in_arm[j] = ind ? 1.0 : 0.0;
    in.unselected[j] = r.s() ? 0.0 : 1.0;
    in.ybar[j] = r.ybar_or_zero();
    const double p_raw = nu.sampling().raw(r);
    const double e_raw = nu.treatment().raw(r, arm);
    in.p[j] = nu.clip(p_raw);
    in.e[j] = nu.clip(e_raw);
    if (ind) {
      if (p_raw == 0.0 || e_raw == 0.0)
        throw EstimationError("positivity violation: cluster " + r.id() + " is in arm " + std::to_string(arm) +
                              " but has zero sampling or treatment probability");
      if (in.p[j] != p_raw || in.e[j] != e_raw) {
        ++in.clipped;
        if (nu.strict())
          throw EstimationError("positivity guard: probability clipped for cluster " + r.id() + " (strict mode)");
      }
    }
    if (with_outcome) in.g[j] = nu.g_hat(r, arm);
  }
  return in;
}

}  // namespace crtgen
