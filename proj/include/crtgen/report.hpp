#pragma once

#include <cstdio>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "crtgen/csv.hpp"
#include "crtgen/estimators.hpp"
#include "crtgen/simulation.hpp"
#include "crtgen/version.hpp"

namespace crtgen::report {

using Json = nlohmann::ordered_json;

namespace detail {

inline std::string cell(const std::optional<double>& v) { return v ? csv::format_double(*v) : std::string(); }
inline Json value(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

/// Provenance lines ahead of the CSV header; the reader skips them.
inline void preamble(std::ostream& out, const Json& config) {
  out << "# crtgen " << kVersion << '\n';
  out << "# config " << config.dump() << '\n';
}

}  // namespace detail

// ---------------------------------------------------------------------------
// analyze

inline const csv::Row& analysis_columns() {
  static const csv::Row cols{"target",      "estimator",    "point",          "se_ic",
                             "ci_lo",       "ci_hi",        "se_bootstrap",   "ci_bootstrap_lo",
                             "ci_bootstrap_hi", "level",    "bootstrap_completed", "bootstrap_skipped",
                             "positivity_clipped"};
  return cols;
}

inline void write_analysis_csv(std::ostream& out, const std::vector<EstimateResult>& results, const Json& config,
                               double level) {
  detail::preamble(out, config);
  csv::write_row(out, analysis_columns());
  for (const auto& r : results) {
    csv::write_row(out, {r.target.label(), r.estimator_name, csv::format_double(r.point), detail::cell(r.se_ic),
                         r.ci ? csv::format_double(r.ci->lo) : "", r.ci ? csv::format_double(r.ci->hi) : "",
                         detail::cell(r.se_bootstrap), r.ci_bootstrap ? csv::format_double(r.ci_bootstrap->lo) : "",
                         r.ci_bootstrap ? csv::format_double(r.ci_bootstrap->hi) : "", csv::format_double(level),
                         std::to_string(r.bootstrap_completed), std::to_string(r.bootstrap_skipped),
                         std::to_string(r.positivity_clipped)});
  }
}

inline Json analysis_json(const std::vector<EstimateResult>& results, const Json& config) {
  Json rows = Json::array();
  for (const auto& r : results) {
    Json diag = Json::array();
    for (const auto& d : r.nuisance_diagnostics)
      diag.push_back({{"model", d.model}, {"iterations", d.iterations}, {"deviance", d.deviance}});
    auto interval = [](const std::optional<IntervalEstimate>& ci) {
      return ci ? Json{{"level", ci->level},
                       {"lo", ci->lo},
                       {"hi", ci->hi},
                       {"se_source", std::string(to_string(ci->se_source))}}
                : Json(nullptr);
    };
    rows.push_back({{"target", r.target.label()},
                    {"estimator", r.estimator_name},
                    {"point", r.point},
                    {"se_ic", detail::value(r.se_ic)},
                    {"ci", interval(r.ci)},
                    {"se_bootstrap", detail::value(r.se_bootstrap)},
                    {"ci_bootstrap", interval(r.ci_bootstrap)},
                    {"bootstrap_completed", r.bootstrap_completed},
                    {"bootstrap_skipped", r.bootstrap_skipped},
                    {"positivity_clipped", r.positivity_clipped},
                    {"nuisance_diagnostics", diag}});
  }
  return Json{{"crtgen_version", kVersion}, {"config", config}, {"results", rows}};
}

inline void print_analysis_summary(std::ostream& out, const std::vector<EstimateResult>& results) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-18s %-16s %12s %12s %12s %12s\n", "target", "estimator", "point", "se_ic", "ci_lo",
                "ci_hi");
  out << buf;
  for (const auto& r : results) {
    auto num = [](const std::optional<double>& v) {
      char b[32];
      if (v)
        std::snprintf(b, sizeof b, "%12.6f", *v);
      else
        std::snprintf(b, sizeof b, "%12s", "-");
      return std::string(b);
    };
    std::snprintf(buf, sizeof buf, "%-18s %-16s %12.6f %s %s %s\n", r.target.label().c_str(), r.estimator_name.c_str(),
                  r.point, num(r.se_ic).c_str(), num(r.ci ? std::optional(r.ci->lo) : std::nullopt).c_str(),
                  num(r.ci ? std::optional(r.ci->hi) : std::nullopt).c_str());
    out << buf;
  }
}

// ---------------------------------------------------------------------------
// simulate

inline const csv::Row& simulation_columns() {
  static const csv::Row cols{"estimand",       "trial_size",         "mode",          "estimator",
                             "truth",          "scaled_bias",        "scaled_sd",     "scaled_ase_ic",
                             "scaled_ase_bootstrap", "coverage_ic",  "coverage_bootstrap", "runs_used",
                             "runs_failed",    "bootstrap_skipped"};
  return cols;
}

inline void write_simulation_csv(std::ostream& out, const sim::SimulationReport& rep, const Json& config) {
  detail::preamble(out, config);
  csv::write_row(out, simulation_columns());
  for (const auto& r : rep.rows)
    csv::write_row(out, {r.key.target.label(), std::to_string(r.key.trial_size), r.key.mode, r.key.estimator,
                         csv::format_double(r.truth), detail::cell(r.scaled_bias), detail::cell(r.scaled_sd),
                         detail::cell(r.scaled_ase_ic), detail::cell(r.scaled_ase_bootstrap),
                         detail::cell(r.coverage_ic), detail::cell(r.coverage_bootstrap), std::to_string(r.runs_used),
                         std::to_string(r.runs_failed), std::to_string(r.bootstrap_skipped)});
}

inline Json simulation_json(const sim::SimulationReport& rep, const Json& config) {
  Json truth = Json::object();
  auto truth_entry = [](const sim::TruthValue& t) { return Json{{"value", t.value}, {"mc_se", t.mc_se}}; };
  for (const auto& [k, v] : rep.truth.entire) truth[k] = truth_entry(v);
  for (const auto& [n, table] : rep.truth.non_randomized)
    for (const auto& [k, v] : table) truth[k + " n=" + std::to_string(n)] = truth_entry(v);
  Json sizes = Json::array();
  for (const auto& s : rep.sizes)
    sizes.push_back({{"trial_size", s.trial_size},
                     {"dropped_runs", s.dropped_runs},
                     {"mean_realized_trial_size", s.mean_realized_trial_size},
                     {"treated_share", s.treated_share}});
  Json rows = Json::array();
  for (const auto& r : rep.rows)
    rows.push_back({{"estimand", r.key.target.label()},
                    {"trial_size", r.key.trial_size},
                    {"mode", r.key.mode},
                    {"estimator", r.key.estimator},
                    {"truth", r.truth},
                    {"scaled_bias", detail::value(r.scaled_bias)},
                    {"scaled_sd", detail::value(r.scaled_sd)},
                    {"scaled_ase_ic", detail::value(r.scaled_ase_ic)},
                    {"scaled_ase_bootstrap", detail::value(r.scaled_ase_bootstrap)},
                    {"coverage_ic", detail::value(r.coverage_ic)},
                    {"coverage_bootstrap", detail::value(r.coverage_bootstrap)},
                    {"runs_used", r.runs_used},
                    {"runs_failed", r.runs_failed},
                    {"bootstrap_skipped", r.bootstrap_skipped}});
  return Json{{"crtgen_version", kVersion},
              {"config", config},
              {"n_runs", rep.n_runs},
              {"scale", rep.scale},
              {"worst_failure_rate", rep.worst_failure_rate},
              {"failed", rep.failed},
              {"truth", truth},
              {"trial_sizes", sizes},
              {"rows", rows}};
}

/// Contrast rows only, one line per (estimand, n, mode, estimator).
inline void print_simulation_summary(std::ostream& out, const sim::SimulationReport& rep) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-8s %5s %-8s %-28s %9s %8s %8s %8s %7s %7s\n", "estimand", "n", "mode", "estimator",
                "bias", "sd", "ase_ic", "ase_bs", "cov_ic", "cov_bs");
  out << buf;
  auto num = [](const std::optional<double>& v, int width, int prec) {
    char b[32];
    if (v)
      std::snprintf(b, sizeof b, "%*.*f", width, prec, *v);
    else
      std::snprintf(b, sizeof b, "%*s", width, "-");
    return std::string(b);
  };
  for (const auto& r : rep.rows) {
    if (!r.key.target.is_contrast()) continue;
    std::snprintf(buf, sizeof buf, "%-8s %5zu %-8s %-28s %s %s %s %s %s %s\n", r.key.target.label().c_str(),
                  r.key.trial_size, r.key.mode.c_str(), r.key.estimator.c_str(), num(r.scaled_bias, 9, 3).c_str(),
                  num(r.scaled_sd, 8, 3).c_str(), num(r.scaled_ase_ic, 8, 3).c_str(),
                  num(r.scaled_ase_bootstrap, 8, 3).c_str(), num(r.coverage_ic, 7, 3).c_str(),
                  num(r.coverage_bootstrap, 7, 3).c_str());
    out << buf;
  }
  std::snprintf(buf, sizeof buf, "runs: %zu  worst failure rate: %.4f%s\n", rep.n_runs, rep.worst_failure_rate,
                rep.failed ? "  (study failed)" : "");
  out << buf;
}

}  // namespace crtgen::report
