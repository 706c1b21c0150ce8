#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "crtgen/bootstrap.hpp"
#include "crtgen/data_model.hpp"
#include "crtgen/error.hpp"
#include "crtgen/estimators.hpp"
#include "crtgen/nuisance.hpp"
#include "crtgen/simulation.hpp"

namespace crtgen::config {

using Json = nlohmann::ordered_json;

enum class OutputFormat { Both, Csv, Json };

inline OutputFormat parse_output_format(std::string_view s) {
  if (s == "csv") return OutputFormat::Csv;
  if (s == "json") return OutputFormat::Json;
  if (s == "both") return OutputFormat::Both;
  throw ConfigError("unknown output format '" + std::string(s) + "' (expected csv|json|both)");
}
inline std::string_view to_string(OutputFormat f) {
  return f == OutputFormat::Csv ? "csv" : f == OutputFormat::Json ? "json" : "both";
}

/// Settings for `analyze`. Data paths are resolved relative to the config file.
struct AnalyzeConfig {
  std::filesystem::path clusters, individuals;
  NuisanceConfig nuisance;
  std::vector<std::string> design_column_names;  // empty selects every x column
  std::vector<EstimatorKind> estimators{EstimatorKind::Aipw};
  std::vector<EstimandTarget> targets{EstimandTarget{Population::Entire, 1, 0}};
  double level = 0.95;
  std::optional<BootstrapConfig> bootstrap;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "crtgen-out";
  OutputFormat format = OutputFormat::Both;
  unsigned threads = 1;
};

struct SimulateConfig {
  sim::SimulationConfig simulation;
  std::filesystem::path output_dir = "crtgen-out";
  OutputFormat format = OutputFormat::Both;
};

namespace detail {

inline void reject_unknown(const Json& obj, std::string_view where, std::initializer_list<std::string_view> allowed) {
  if (!obj.is_object()) throw ConfigError(std::string(where) + " must be a JSON object");
  for (const auto& [k, v] : obj.items()) {
    bool ok = false;
    for (auto a : allowed) ok = ok || a == k;
    if (!ok) throw ConfigError("unknown key '" + k + "' in " + std::string(where));
  }
}

template <class T>
T get(const Json& obj, const char* key, std::string_view where) {
  try {
    return obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("bad or missing value for '" + std::string(key) + "' in " + std::string(where));
  }
}

template <class T>
void read(const Json& obj, const char* key, std::string_view where, T& out) {
  if (obj.contains(key)) out = get<T>(obj, key, where);
}

inline BootstrapConfig bootstrap_from(const Json& b, std::uint64_t default_seed) {
  reject_unknown(b, "bootstrap", {"replicates", "seed", "on_degenerate"});
  BootstrapConfig cfg;
  cfg.seed = default_seed;
  read(b, "replicates", "bootstrap", cfg.replicates);
  read(b, "seed", "bootstrap", cfg.seed);
  if (b.contains("on_degenerate")) cfg.on_degenerate = parse_on_degenerate(get<std::string>(b, "on_degenerate", "bootstrap"));
  if (cfg.replicates < 1) throw ConfigError("bootstrap.replicates must be >= 1");
  return cfg;
}

inline Json bootstrap_json(const BootstrapConfig& b) {
  return Json{{"replicates", b.replicates}, {"seed", b.seed}, {"on_degenerate", std::string(to_string(b.on_degenerate))}};
}

inline sim::EstimatorSpec spec_from(const Json& e) {
  reject_unknown(e, "simulation.estimators[]", {"name", "kind", "outcome", "features", "bootstrap"});
  sim::EstimatorSpec s;
  s.name = get<std::string>(e, "name", "simulation.estimators[]");
  s.kind = parse_estimator_kind(get<std::string>(e, "kind", "simulation.estimators[]"));
  if (e.contains("outcome")) s.outcome = parse_outcome_mode(get<std::string>(e, "outcome", "simulation.estimators[]"));
  if (e.contains("features"))
    s.features = parse_outcome_features(get<std::string>(e, "features", "simulation.estimators[]"));
  read(e, "bootstrap", "simulation.estimators[]", s.bootstrap);
  return s;
}

inline Json spec_json(const sim::EstimatorSpec& s) {
  return Json{{"name", s.name},
              {"kind", std::string(to_string(s.kind))},
              {"outcome", std::string(to_string(s.outcome))},
              {"features", std::string(to_string(s.features))},
              {"bootstrap", s.bootstrap}};
}

}  // namespace detail

inline Json load_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
}

inline AnalyzeConfig analyze_from_json(const Json& j, const std::filesystem::path& base_dir = {}) {
  using detail::get;
  using detail::read;
  detail::reject_unknown(j, "config",
                         {"data", "nuisance", "estimators", "targets", "level", "bootstrap", "seed", "output"});
  AnalyzeConfig cfg;
  if (!j.contains("data")) throw ConfigError("analyze needs a 'data' block with cluster and individual table paths");
  const auto& d = j.at("data");
  detail::reject_unknown(d, "data", {"clusters", "individuals"});
  cfg.clusters = base_dir / get<std::string>(d, "clusters", "data");
  cfg.individuals = base_dir / get<std::string>(d, "individuals", "data");
  read(j, "seed", "config", cfg.seed);

  if (j.contains("nuisance")) {
    const auto& n = j.at("nuisance");
    detail::reject_unknown(n, "nuisance",
                           {"sampling", "treatment", "outcome", "outcome_features", "design_columns",
                            "treatment_probabilities", "probability_floor", "strict_positivity"});
    auto& nc = cfg.nuisance;
    if (n.contains("sampling")) nc.sampling_mode = parse_probability_mode(get<std::string>(n, "sampling", "nuisance"));
    if (n.contains("treatment"))
      nc.treatment_mode = parse_probability_mode(get<std::string>(n, "treatment", "nuisance"));
    if (n.contains("outcome")) nc.outcome_mode = parse_outcome_mode(get<std::string>(n, "outcome", "nuisance"));
    if (n.contains("outcome_features"))
      nc.features.outcome_features = parse_outcome_features(get<std::string>(n, "outcome_features", "nuisance"));
    read(n, "design_columns", "nuisance", cfg.design_column_names);
    if (n.contains("treatment_probabilities")) {
      const auto& tp = n.at("treatment_probabilities");
      if (!tp.is_object()) throw ConfigError("nuisance.treatment_probabilities must map arm labels to probabilities");
      for (const auto& [k, v] : tp.items()) {
        auto arm = csv::parse_int(k);
        if (!arm || !v.is_number()) throw ConfigError("bad treatment probability entry '" + k + "'");
        nc.treatment_probabilities[static_cast<Arm>(*arm)] = v.get<double>();
      }
    }
    read(n, "probability_floor", "nuisance", nc.probability_floor);
    read(n, "strict_positivity", "nuisance", nc.strict_positivity);
    if (!(nc.probability_floor > 0.0 && nc.probability_floor < 0.5))
      throw ConfigError("nuisance.probability_floor must lie in (0, 0.5)");
  }

  if (j.contains("estimators")) {
    cfg.estimators.clear();
    for (const auto& e : get<std::vector<std::string>>(j, "estimators", "config"))
      cfg.estimators.push_back(parse_estimator_kind(e));
    if (cfg.estimators.empty()) throw ConfigError("estimators list is empty");
  }
  if (j.contains("targets")) {
    cfg.targets.clear();
    for (const auto& t : get<std::vector<std::string>>(j, "targets", "config")) cfg.targets.push_back(parse_target(t));
    if (cfg.targets.empty()) throw ConfigError("targets list is empty");
  }
  read(j, "level", "config", cfg.level);
  if (!(cfg.level > 0.0 && cfg.level < 1.0)) throw ConfigError("level must lie in (0,1)");
  if (j.contains("bootstrap")) cfg.bootstrap = detail::bootstrap_from(j.at("bootstrap"), cfg.seed);
  if (j.contains("output")) {
    const auto& o = j.at("output");
    detail::reject_unknown(o, "output", {"dir", "format"});
    if (o.contains("dir")) cfg.output_dir = base_dir / get<std::string>(o, "dir", "output");
    if (o.contains("format")) cfg.format = parse_output_format(get<std::string>(o, "format", "output"));
  }
  return cfg;
}

/// Resolved analysis settings as embedded in reports. Thread count is left
/// out so that reports do not depend on it.
inline Json to_json(const AnalyzeConfig& c) {
  Json tp = Json::object();
  for (auto [a, p] : c.nuisance.treatment_probabilities) tp[std::to_string(a)] = p;
  Json est = Json::array(), tgt = Json::array();
  for (auto k : c.estimators) est.push_back(std::string(to_string(k)));
  for (const auto& t : c.targets) tgt.push_back(t.label());
  Json j{{"data", {{"clusters", c.clusters.filename().string()}, {"individuals", c.individuals.filename().string()}}},
         {"nuisance",
          {{"sampling", std::string(to_string(c.nuisance.sampling_mode))},
           {"treatment", std::string(to_string(c.nuisance.treatment_mode))},
           {"outcome", std::string(to_string(c.nuisance.outcome_mode))},
           {"outcome_features", std::string(to_string(c.nuisance.features.outcome_features))},
           {"design_columns", c.design_column_names},
           {"treatment_probabilities", tp},
           {"probability_floor", c.nuisance.probability_floor},
           {"strict_positivity", c.nuisance.strict_positivity}}},
         {"estimators", est},
         {"targets", tgt},
         {"level", c.level},
         {"seed", c.seed}};
  if (c.bootstrap) j["bootstrap"] = detail::bootstrap_json(*c.bootstrap);
  return j;
}

inline SimulateConfig simulate_from_json(const Json& j, const std::filesystem::path& base_dir = {}) {
  using detail::get;
  using detail::read;
  detail::reject_unknown(j, "config", {"simulation", "bootstrap", "seed", "output"});
  SimulateConfig cfg;
  auto& s = cfg.simulation;
  read(j, "seed", "config", s.seed);
  if (!j.contains("simulation")) throw ConfigError("simulate needs a 'simulation' block");
  const auto& b = j.at("simulation");
  constexpr std::string_view where = "simulation";
  detail::reject_unknown(b, where,
                         {"m", "mean_cluster_size", "pr_x1", "trial_sizes", "trial_x_share", "treatment_prob", "n_runs",
                          "oracle_runs", "modes", "bootstrap_modes", "estimators", "level", "max_failure_rate",
                          "probability_floor"});
  read(b, "m", where, s.m);
  read(b, "mean_cluster_size", where, s.mean_cluster_size);
  read(b, "pr_x1", where, s.pr_x1);
  read(b, "trial_sizes", where, s.trial_sizes);
  read(b, "trial_x_share", where, s.trial_x_share);
  read(b, "treatment_prob", where, s.treatment_prob);
  read(b, "n_runs", where, s.n_runs);
  read(b, "oracle_runs", where, s.oracle_runs);
  read(b, "level", where, s.level);
  read(b, "max_failure_rate", where, s.max_failure_rate);
  read(b, "probability_floor", where, s.probability_floor);
  auto modes = [&](const char* key, std::vector<ProbabilityMode>& out) {
    if (!b.contains(key)) return;
    out.clear();
    for (const auto& m : get<std::vector<std::string>>(b, key, where)) out.push_back(parse_probability_mode(m));
  };
  modes("modes", s.modes);
  modes("bootstrap_modes", s.bootstrap_modes);
  if (b.contains("estimators")) {
    if (!b.at("estimators").is_array()) throw ConfigError("simulation.estimators must be an array");
    s.estimators.clear();
    for (const auto& e : b.at("estimators")) s.estimators.push_back(detail::spec_from(e));
  }
  if (j.contains("bootstrap")) {
    auto bc = detail::bootstrap_from(j.at("bootstrap"), s.seed);
    s.bootstrap_B = bc.replicates;
    s.on_degenerate = bc.on_degenerate;
    if (j.at("bootstrap").contains("seed"))
      throw ConfigError("bootstrap.seed is not used by simulate; streams derive from the top-level seed");
  }
  if (j.contains("output")) {
    const auto& o = j.at("output");
    detail::reject_unknown(o, "output", {"dir", "format"});
    if (o.contains("dir")) cfg.output_dir = base_dir / get<std::string>(o, "dir", "output");
    if (o.contains("format")) cfg.format = parse_output_format(get<std::string>(o, "format", "output"));
  }
  return cfg;
}

inline Json to_json(const sim::SimulationConfig& s) {
  Json modes = Json::array(), bmodes = Json::array(), est = Json::array();
  for (auto m : s.modes) modes.push_back(std::string(to_string(m)));
  for (auto m : s.bootstrap_modes) bmodes.push_back(std::string(to_string(m)));
  for (const auto& e : s.estimators) est.push_back(detail::spec_json(e));
  return Json{{"simulation",
               {{"m", s.m},
                {"mean_cluster_size", s.mean_cluster_size},
                {"pr_x1", s.pr_x1},
                {"trial_sizes", s.trial_sizes},
                {"trial_x_share", s.trial_x_share},
                {"treatment_prob", s.treatment_prob},
                {"n_runs", s.n_runs},
                {"oracle_runs", s.oracle_runs},
                {"modes", modes},
                {"bootstrap_modes", bmodes},
                {"estimators", est},
                {"level", s.level},
                {"max_failure_rate", s.max_failure_rate},
                {"probability_floor", s.probability_floor}}},
              {"bootstrap", {{"replicates", s.bootstrap_B}, {"on_degenerate", std::string(to_string(s.on_degenerate))}}},
              {"seed", s.seed}};
}

/// Maps configured design column names to x column indices.
inline std::vector<std::size_t> resolve_design_columns(const ClusterDataset& ds, const std::vector<std::string>& names) {
  std::vector<std::size_t> out;
  for (const auto& n : names) {
    const auto& xs = ds.x_names();
    auto it = std::find(xs.begin(), xs.end(), n);
    if (it == xs.end()) throw ConfigError("design column '" + n + "' is not a cluster covariate");
    out.push_back(static_cast<std::size_t>(it - xs.begin()));
  }
  return out;
}

}  // namespace crtgen::config
