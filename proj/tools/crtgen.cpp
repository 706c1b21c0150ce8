// crtgen: analyze a cluster-randomized trial nested in a cohort, validate its
// input tables, or run the simulation study.
//
// Exit codes: 0 success; 2 I/O, validation or configuration error;
// 3 estimation error; 4 simulation with more than the allowed share of
// failed runs; 1 anything else.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"

#include "crtgen/bootstrap.hpp"
#include "crtgen/config.hpp"
#include "crtgen/data_model.hpp"
#include "crtgen/estimators.hpp"
#include "crtgen/parallel.hpp"
#include "crtgen/report.hpp"
#include "crtgen/simulation.hpp"

namespace fs = std::filesystem;
using namespace crtgen;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInternal = 1;
constexpr int kExitInput = 2;
constexpr int kExitEstimation = 3;
constexpr int kExitStudyFailed = 4;

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;
  std::optional<std::string> output;
  std::optional<std::string> format;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool config_required) {
  auto* c = cmd->add_option("--config", f.config, "JSON configuration file");
  if (config_required) c->required();
  cmd->add_option("--seed", f.seed, "Override the configured seed");
  cmd->add_option("--threads", f.threads, "Worker threads (default: CRTGEN_THREADS or all cores)")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--output", f.output, "Output directory");
  cmd->add_option("--format", f.format, "Report format")->check(CLI::IsMember({"csv", "json", "both"}));
}

unsigned thread_count(const CommonFlags& f) { return f.threads ? *f.threads : default_thread_count(); }

fs::path base_dir(const std::string& config) { return fs::absolute(config).parent_path(); }

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << content;
  if (!out) throw DataError("write failed for " + path.string());
}

void prepare_output(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create output directory " + dir.string() + ": " + ec.message());
}

bool report_validation(const ValidationReport& rep) {
  for (const auto& w : rep.warnings)
    std::cerr << "warning [" << w.rule << "]" << (w.cluster_id.empty() ? "" : " " + w.cluster_id) << ": " << w.message
              << '\n';
  for (const auto& e : rep.errors)
    std::cerr << "error [" << e.rule << "]" << (e.cluster_id.empty() ? "" : " " + e.cluster_id) << ": " << e.message
              << '\n';
  return rep.ok();
}

int cmd_validate(const CommonFlags& f, const std::string& clusters, const std::string& individuals) {
  fs::path cpath = clusters, ipath = individuals;
  if (!f.config.empty() && (cpath.empty() || ipath.empty())) {
    auto cfg = config::analyze_from_json(config::load_json(f.config), base_dir(f.config));
    if (cpath.empty()) cpath = cfg.clusters;
    if (ipath.empty()) ipath = cfg.individuals;
  }
  if (cpath.empty() || ipath.empty()) throw ConfigError("validate needs --config or both --clusters and --individuals");
  auto ds = load_dataset(cpath, ipath);
  auto rep = validate(ds);
  const bool ok = report_validation(rep);
  std::cout << ds.size() << " clusters, " << ds.count_selected() << " randomized; " << rep.errors.size()
            << " errors, " << rep.warnings.size() << " warnings\n";
  return ok ? kExitOk : kExitInput;
}

int cmd_analyze(const CommonFlags& f, const std::string& clusters, const std::string& individuals) {
  auto j = config::load_json(f.config);
  if (f.seed) j["seed"] = *f.seed;
  auto cfg = config::analyze_from_json(j, base_dir(f.config));
  if (!clusters.empty()) cfg.clusters = clusters;
  if (!individuals.empty()) cfg.individuals = individuals;
  if (f.output) cfg.output_dir = *f.output;
  if (f.format) cfg.format = config::parse_output_format(*f.format);
  cfg.threads = thread_count(f);

  auto ds = load_dataset(cfg.clusters, cfg.individuals);
  if (!report_validation(validate(ds))) return kExitInput;

  auto nc = cfg.nuisance;
  nc.features.design_columns = config::resolve_design_columns(ds, cfg.design_column_names);
  bool need_outcome = false;
  for (auto k : cfg.estimators) need_outcome = need_outcome || uses_outcome_model(k);
  if (need_outcome && nc.outcome_mode == OutcomeMode::None)
    throw ConfigError("an augmented estimator was requested but nuisance.outcome is 'none'");
  if (!need_outcome) nc.outcome_mode = OutcomeMode::None;

  for (const auto& t : cfg.targets)
    if (t.population == Population::NonRandomized && ds.count_selected() == ds.size())
      throw EstimationError(t.label() + ": no non-randomized (S=0) clusters; the estimand is undefined");

  auto nu = fit_nuisance(ds, nc);
  std::vector<EstimateResult> results;
  for (const auto& target : cfg.targets) {
    for (auto kind : cfg.estimators) {
      if (!supports(kind, target.population)) {
        std::cerr << "note: " << to_string(kind) << " does not estimate " << target.label() << "; skipped\n";
        continue;
      }
      auto r = estimate(ds, kind, target, nu, cfg.level);
      if (cfg.bootstrap) {
        auto bc = *cfg.bootstrap;
        bc.threads = cfg.threads;
        auto b = cluster_bootstrap(ds, kind, target, nc, bc);
        r.bootstrap_completed = b.replicates.size();
        r.bootstrap_skipped = b.skipped;
        if (b.se) {
          r.se_bootstrap = b.se;
          r.ci_bootstrap = wald_interval(r.point, *b.se, cfg.level, SeSource::Bootstrap);
        }
      }
      results.push_back(std::move(r));
    }
  }
  if (results.empty()) throw ConfigError("no configured estimator supports any configured target");

  const auto resolved = config::to_json(cfg);
  prepare_output(cfg.output_dir);
  if (cfg.format != config::OutputFormat::Json) {
    std::ostringstream csv_out;
    report::write_analysis_csv(csv_out, results, resolved, cfg.level);
    write_file(cfg.output_dir / "analysis.csv", csv_out.str());
  }
  if (cfg.format != config::OutputFormat::Csv)
    write_file(cfg.output_dir / "analysis.json", report::analysis_json(results, resolved).dump(2) + "\n");
  report::print_analysis_summary(std::cout, results);
  return kExitOk;
}

int cmd_simulate(const CommonFlags& f, std::optional<std::size_t> runs) {
  auto j = config::load_json(f.config);
  if (f.seed) j["seed"] = *f.seed;
  if (runs) {
    if (!j.contains("simulation")) throw ConfigError("simulate needs a 'simulation' block");
    j["simulation"]["n_runs"] = *runs;
  }
  auto cfg = config::simulate_from_json(j, base_dir(f.config));
  if (f.output) cfg.output_dir = *f.output;
  if (f.format) cfg.format = config::parse_output_format(*f.format);
  cfg.simulation.threads = thread_count(f);
  cfg.simulation.validate();
  // surfaces an infeasible sampling design before any work is done
  {
    auto rng = make_engine(cfg.simulation.seed, {streams::kPopulation, 0});
    auto pop = sim::generate_population(cfg.simulation, rng);
    for (auto n : cfg.simulation.trial_sizes)
      sim::compute_sampling_probabilities(pop, n, cfg.simulation.trial_x_share, cfg.simulation.treatment_prob);
  }

  auto rep = sim::run_study(cfg.simulation);
  const auto resolved = config::to_json(cfg.simulation);
  prepare_output(cfg.output_dir);
  if (cfg.format != config::OutputFormat::Json) {
    std::ostringstream csv_out;
    report::write_simulation_csv(csv_out, rep, resolved);
    write_file(cfg.output_dir / "simulation.csv", csv_out.str());
  }
  if (cfg.format != config::OutputFormat::Csv)
    write_file(cfg.output_dir / "simulation.json", report::simulation_json(rep, resolved).dump(2) + "\n");
  report::print_simulation_summary(std::cout, rep);
  if (rep.failed) {
    std::cerr << "error: failed-run rate " << rep.worst_failure_rate << " exceeds "
              << cfg.simulation.max_failure_rate << '\n';
    return kExitStudyFailed;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Generalizing cluster randomized trial results to a target population of clusters"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  CommonFlags analyze_flags, simulate_flags, validate_flags;
  std::string a_clusters, a_individuals, v_clusters, v_individuals;
  std::optional<std::size_t> runs;

  auto* analyze = app.add_subcommand("analyze", "Estimate target-population effects from a dataset");
  add_common(analyze, analyze_flags, true);
  analyze->add_option("--clusters", a_clusters, "Cluster table (overrides the config)");
  analyze->add_option("--individuals", a_individuals, "Individual table (overrides the config)");

  auto* simulate = app.add_subcommand("simulate", "Run the simulation study");
  add_common(simulate, simulate_flags, true);
  simulate->add_option("--runs", runs, "Override simulation.n_runs")->check(CLI::PositiveNumber);

  auto* validate_cmd = app.add_subcommand("validate", "Check a dataset and report structural and positivity issues");
  add_common(validate_cmd, validate_flags, false);
  validate_cmd->add_option("--clusters", v_clusters, "Cluster table");
  validate_cmd->add_option("--individuals", v_individuals, "Individual table");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInput;
  }

  try {
    if (analyze->parsed()) return cmd_analyze(analyze_flags, a_clusters, a_individuals);
    if (simulate->parsed()) return cmd_simulate(simulate_flags, runs);
    return cmd_validate(validate_flags, v_clusters, v_individuals);
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const EstimationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitEstimation;
  } catch (const FitError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitEstimation;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
}
