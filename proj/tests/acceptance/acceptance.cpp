// Acceptance suite: one PASS/FAIL line per criterion.
//
// Criteria 1 and 2 run in process on small fixtures. Criteria 3 to 11 run the
// desk-scale simulation through the command line tool (m=5000, mean cluster
// size 100, trial sizes 50 and 250, 200 runs, 100 bootstrap replicates) and
// read the JSON report.
//
// The exit status is nonzero when the harness cannot run or a criterion
// outside kKnownFailures fails. Known failures still print FAIL.

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "crtgen/estimators.hpp"
#include "crtgen/nuisance.hpp"
#include "fixtures.hpp"

namespace fs = std::filesystem;
using namespace crtgen;
using Json = nlohmann::json;

namespace {

// Pinned tolerances.
constexpr double kReductionTol = 0.0;  // bit-equal
constexpr double kPlugInTol = 1e-10;
constexpr double kTrialOnlyPsi = 13.129;
constexpr double kTrialOnlyPhi = 13.821;
constexpr double kTrialOnlyTol = 2.0;
constexpr double kBiasTol = 0.8;
constexpr double kSdRatioMin = 5.0;
constexpr double kAugSdPsi = 0.626;
constexpr double kAugSdPhi = 0.643;
constexpr double kAugSdRelTol = 0.30;
constexpr double kModeSpreadRelTol = 0.15;
constexpr double kCoverageLo = 0.92;
constexpr double kCoverageHi = 0.98;
constexpr double kOutcomeOnlyBiasMin = 2.0;
constexpr double kVarianceSlack = 1.05;
// The truth's own Monte Carlo error must stay below this share of the bias tolerance.
constexpr double kTruthShare = 0.10;

// Criterion 8 fails on its own terms: see README, "Acceptance results".
const std::set<int> kKnownFailures{8};

constexpr std::size_t kSmall = 50, kLarge = 250;

struct Verdict {
  int id;
  bool pass;
  std::string text;
};

std::vector<Verdict> verdicts;

void report(int id, bool pass, const std::string& text) {
  verdicts.push_back({id, pass, text});
  std::printf("%s  criterion %2d  %s\n", pass ? "PASS" : "FAIL", id, text.c_str());
  std::fflush(stdout);
}

void info(const std::string& text) {
  std::printf("INFO  %s\n", text.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------------------
// criterion 1: weighting estimators are the augmented ones with g = 0

void reduction_identities() {
  std::size_t compared = 0, mismatched = 0;
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    const int m = 30 + static_cast<int>(seed % 7) * 15;
    auto ds = fixtures::random_cohort(seed, m, 0.3 + 0.004 * static_cast<double>(seed), 0.2);
    NuisanceConfig base;
    base.sampling_mode = seed % 2 ? ProbabilityMode::Known : ProbabilityMode::EstimatedComplex;
    base.treatment_mode = seed % 3 ? ProbabilityMode::EstimatedSimple : ProbabilityMode::Known;
    base.treatment_probabilities = {{0, 0.5}, {1, 0.5}};
    auto weighting = base;
    weighting.outcome_mode = OutcomeMode::None;
    auto zero = base;
    zero.outcome_mode = OutcomeMode::Zero;
    const auto nu_w = fit_nuisance(ds, weighting);
    const auto nu_z = fit_nuisance(ds, zero);
    for (const char* t : {"ATE", "mean(1)", "mean(0)"}) {
      auto a = estimate(ds, EstimatorKind::Ipw, parse_target(t), nu_w);
      auto b = estimate(ds, EstimatorKind::Aipw, parse_target(t), nu_z);
      ++compared;
      if (a.point != b.point || a.se_ic != b.se_ic) ++mismatched;
      worst = std::max(worst, std::abs(a.point - b.point));
    }
    for (const char* t : {"ATE|S=0", "mean(1)|S=0", "mean(0)|S=0"}) {
      auto a = estimate(ds, EstimatorKind::Iow, parse_target(t), nu_w);
      auto b = estimate(ds, EstimatorKind::Aiow, parse_target(t), nu_z);
      ++compared;
      if (a.point != b.point || a.se_ic != b.se_ic) ++mismatched;
      worst = std::max(worst, std::abs(a.point - b.point));
    }
  }
  report(1, mismatched == 0 && worst <= kReductionTol,
         fmt("ipw = aipw(g=0), iow = aiow(g=0) bit-equal: %zu/%zu pairs equal on 100 fixtures", compared - mismatched,
             compared));
}

// ---------------------------------------------------------------------------
// criterion 2: saturated nuisance models reproduce the stratum plug-ins

void plug_in_identification() {
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    const int m = 40 + static_cast<int>(seed % 5) * 30;
    auto ds = fixtures::random_cohort(1000 + seed, m, 0.55, 0.25);
    NuisanceConfig nc;
    nc.sampling_mode = ProbabilityMode::EstimatedSimple;
    nc.treatment_mode = ProbabilityMode::EstimatedSimple;
    nc.outcome_mode = OutcomeMode::ClusterLevel;
    nc.features.outcome_features = OutcomeFeatures::DesignOnly;
    const auto nu = fit_nuisance(ds, nc);
    for (Arm a : {0, 1}) {
      // psi(a) = sum_x Pr(X=x) E[Ybar | X=x, S=1, A=a]; phi(a) weights by Pr(X=x | S=0)
      std::map<double, double> clusters, outside, sum, count;
      for (const auto& r : ds.records()) {
        const double x = r.x()[0];
        clusters[x] += 1;
        if (!r.s()) outside[x] += 1;
        if (r.s() && *r.a() == a) sum[x] += r.ybar_or_zero(), count[x] += 1;
      }
      double psi = 0.0, phi = 0.0, n0 = 0.0;
      for (auto [x, n] : clusters) {
        const double mean = sum[x] / count[x];
        psi += n * mean;
        phi += outside[x] * mean;
        n0 += outside[x];
      }
      psi /= static_cast<double>(ds.size());
      phi /= n0;
      const auto t_psi = EstimandTarget{Population::Entire, a, std::nullopt};
      const auto t_phi = EstimandTarget{Population::NonRandomized, a, std::nullopt};
      for (auto k : {EstimatorKind::Ipw, EstimatorKind::Aipw})
        worst = std::max(worst, std::abs(estimate(ds, k, t_psi, nu).point - psi));
      for (auto k : {EstimatorKind::Iow, EstimatorKind::Aiow})
        worst = std::max(worst, std::abs(estimate(ds, k, t_phi, nu).point - phi));
    }
  }
  report(2, worst <= kPlugInTol,
         fmt("saturated ipw/aipw/iow/aiow vs stratum plug-ins on 100 instances: max |diff| = %.3g (tol %.0e)", worst,
             kPlugInTol));
}

// ---------------------------------------------------------------------------
// desk-scale study through the CLI

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

int run_cli(const fs::path& config, const fs::path& out, unsigned threads) {
  const std::string cmd = std::string("\"") + CRTGEN_CLI_PATH + "\" simulate --config \"" + config.string() +
                          "\" --output \"" + out.string() + "\" --threads " + std::to_string(threads) + " > \"" +
                          (out.string() + ".log") + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

class Study {
 public:
  explicit Study(Json report) : j_(std::move(report)) {}

  const Json& row(const std::string& estimand, std::size_t n, const std::string& mode, const std::string& est) const {
    for (const auto& r : j_.at("rows"))
      if (r.at("estimand") == estimand && r.at("trial_size") == n && r.at("mode") == mode && r.at("estimator") == est)
        return r;
    throw std::runtime_error("report has no row " + estimand + " n=" + std::to_string(n) + " " + mode + " " + est);
  }
  double get(const std::string& field, const std::string& estimand, std::size_t n, const std::string& mode,
             const std::string& est) const {
    const auto& v = row(estimand, n, mode, est).at(field);
    if (v.is_null()) throw std::runtime_error(field + " missing for " + est + " " + mode);
    return v.get<double>();
  }
  double bias(const std::string& e, std::size_t n, const std::string& mode, const std::string& est) const {
    return get("scaled_bias", e, n, mode, est);
  }
  double sd(const std::string& e, std::size_t n, const std::string& mode, const std::string& est) const {
    return get("scaled_sd", e, n, mode, est);
  }
  const Json& json() const { return j_; }

 private:
  Json j_;
};

struct Family {
  const char* estimand;
  const char* trial_only_label;
  double trial_only_target;
  const char* weighting;
  const char* aug1;
  const char* aug2;
  double aug1_sd;
};

const Family kPsi{"ATE", "trial_only", kTrialOnlyPsi, "ipw", "aipw1", "aipw2", kAugSdPsi};
const Family kPhi{"ATE|S=0", "trial_only", kTrialOnlyPhi, "iow", "aiow1", "aiow2", kAugSdPhi};

// criteria 3 to 7 for one family; returns one pass flag per criterion
std::vector<std::pair<bool, std::string>> table_checks(const Study& s, const Family& f) {
  std::vector<std::pair<bool, std::string>> out;
  const std::string e = f.estimand;

  const double to = s.bias(e, kLarge, "none", f.trial_only_label);
  out.push_back({std::abs(to - f.trial_only_target) <= kTrialOnlyTol,
                 fmt("%s n=250 trial-only scaled bias %.3f (target %.3f +/- %.1f)", f.estimand, to,
                     f.trial_only_target, kTrialOnlyTol)});

  const double bw = s.bias(e, kLarge, "known", f.weighting), b1 = s.bias(e, kLarge, "known", f.aug1),
               b2 = s.bias(e, kLarge, "known", f.aug2);
  out.push_back({std::abs(bw) < kBiasTol && std::abs(b1) < kBiasTol && std::abs(b2) < kBiasTol,
                 fmt("%s n=250 true probs scaled bias %s %.3f, %s %.3f, %s %.3f (each |.| < %.1f)", f.estimand,
                     f.weighting, bw, f.aug1, b1, f.aug2, b2, kBiasTol)});

  const double sw = s.sd(e, kLarge, "known", f.weighting), s1 = s.sd(e, kLarge, "known", f.aug1),
               sws = s.sd(e, kLarge, "simple", f.weighting);
  const bool ratio_ok = sw / s1 > kSdRatioMin;
  const bool level_ok = std::abs(s1 / f.aug1_sd - 1.0) <= kAugSdRelTol;
  const bool simple_ok = sws < sw;
  out.push_back({ratio_ok && level_ok && simple_ok,
                 fmt("%s n=250 scaled SD %s %.3f / %s %.3f = %.2f (> %.0f); %s SD within %.0f%% of %.3f; "
                     "SD %s simple %.3f < true %.3f",
                     f.estimand, f.weighting, sw, f.aug1, s1, sw / s1, kSdRatioMin, f.aug1, kAugSdRelTol * 100,
                     f.aug1_sd, f.weighting, sws, sw)});

  const double sk = s1, ss = s.sd(e, kLarge, "simple", f.aug1), sc = s.sd(e, kLarge, "complex", f.aug1);
  const double spread = std::max({sk, ss, sc}) / std::min({sk, ss, sc}) - 1.0;
  out.push_back({spread <= kModeSpreadRelTol,
                 fmt("%s n=250 %s scaled SD true/simple/complex %.3f/%.3f/%.3f, spread %.1f%% (<= %.0f%%)",
                     f.estimand, f.aug1, sk, ss, sc, spread * 100, kModeSpreadRelTol * 100)});

  const double cov_bs = s.get("coverage_bootstrap", e, kLarge, "known", f.aug1);
  const double ic50 = s.get("coverage_ic", e, kSmall, "known", f.aug1);
  const double bs50 = s.get("coverage_bootstrap", e, kSmall, "known", f.aug1);
  out.push_back({cov_bs >= kCoverageLo && cov_bs <= kCoverageHi && ic50 < bs50,
                 fmt("%s %s bootstrap coverage n=250 %.3f (in [%.2f, %.2f]); n=50 IC %.3f < bootstrap %.3f",
                     f.estimand, f.aug1, cov_bs, kCoverageLo, kCoverageHi, ic50, bs50)});
  return out;
}

Json desk_config() {
  return Json{{"simulation",
               {{"m", 5000},
                {"mean_cluster_size", 100},
                {"pr_x1", 0.05},
                {"trial_sizes", {kSmall, kLarge}},
                {"trial_x_share", 0.5},
                {"treatment_prob", 0.5},
                {"n_runs", 200},
                {"oracle_runs", 200},
                {"modes", {"known", "simple", "complex"}},
                {"bootstrap_modes", {"known"}}}},
              {"bootstrap", {{"replicates", 100}, {"on_degenerate", "skip"}}},
              {"seed", 20240601}};
}

void desk_study() {
  const auto root = fs::temp_directory_path() / ("crtgen-acceptance-" + std::to_string(::getpid()));
  fs::remove_all(root);
  fs::create_directories(root);
  const auto config = root / "desk.json";
  std::ofstream(config) << desk_config().dump(2) << '\n';

  const auto t0 = std::chrono::steady_clock::now();
  const int code_a = run_cli(config, root / "a", 1);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (code_a != 0) throw std::runtime_error("simulate exited with " + std::to_string(code_a) + "; see " +
                                            (root / "a.log").string());
  info(fmt("desk study: m=5000, 200 runs, B=100, trial sizes 50 and 250, %.0f s on 1 thread", secs));

  const Study s(Json::parse(slurp(root / "a" / "simulation.json")));
  const auto& truth = s.json().at("truth");
  const double scale = s.json().at("scale").get<double>();
  double worst_truth = 0.0;
  for (const auto& [k, v] : truth.items()) worst_truth = std::max(worst_truth, v.at("mc_se").get<double>() * scale);
  info(fmt("truth ATE %.5f, ATE|S=0 at n=250 %.5f; worst scaled truth MC-SE %.4f (%s %.0f%% of the bias tolerance)",
           truth.at("ATE").at("value").get<double>(), truth.at("ATE|S=0 n=250").at("value").get<double>(),
           worst_truth, worst_truth < kTruthShare * kBiasTol ? "below" : "NOT below", kTruthShare * 100));
  info(fmt("worst failed-run rate %.4f", s.json().at("worst_failure_rate").get<double>()));

  const auto psi = table_checks(s, kPsi);
  for (int i = 0; i < 5; ++i) report(3 + i, psi[i].first, psi[i].second);

  // criterion 8: misspecified outcome model (intercept and X only)
  {
    const double aug = s.bias("ATE", kLarge, "known", "aipw_x_only");
    const double plug = s.bias("ATE", kLarge, "none", "outcome_only_x_only");
    report(8, std::abs(aug) < kBiasTol && std::abs(plug) > kOutcomeOnlyBiasMin,
           fmt("n=250 true probs, g on intercept+X: aipw scaled bias %.3f (|.| < %.1f); outcome-only %.3f "
               "(|.| > %.1f)",
               aug, kBiasTol, plug, kOutcomeOnlyBiasMin));
    info(fmt("same check with an intercept-only g: aipw scaled bias %.3f, outcome-only %.3f",
             s.bias("ATE", kLarge, "known", "aipw_intercept_only"),
             s.bias("ATE", kLarge, "none", "outcome_only_intercept_only")));
  }

  // criterion 9: aiow against its indicator-weighted variant
  {
    const double v = std::pow(s.sd("ATE|S=0", kLarge, "known", "aiow1"), 2);
    const double vi = std::pow(s.sd("ATE|S=0", kLarge, "known", "aiow1_indicator"), 2);
    report(9, v <= kVarianceSlack * vi,
           fmt("ATE|S=0 n=250 true probs scaled variance aiow %.4f <= %.2f x indicator variant %.4f", v,
               kVarianceSlack, vi));
  }

  // criterion 10: criteria 3 to 7 for the S=0 estimands
  {
    const auto phi = table_checks(s, kPhi);
    bool all = true;
    for (const auto& c : phi) all = all && c.first;
    int failed = 0;
    for (const auto& c : phi) failed += !c.first;
    report(10, all, fmt("S=0 repeat of criteria 3-7: %d of 5 sub-checks pass", 5 - failed));
    for (int i = 0; i < 5; ++i) std::printf("      10.%d %s  %s\n", 3 + i, phi[i].first ? "ok  " : "fail", phi[i].second.c_str());
  }

  // criterion 11: byte-identical reports across repeats and thread counts
  {
    const int code_b = run_cli(config, root / "b", 1);
    const int code_c = run_cli(config, root / "c", 8);
    bool same = code_b == 0 && code_c == 0;
    for (const char* f : {"simulation.csv", "simulation.json"}) {
      const auto a = slurp(root / "a" / f);
      same = same && !a.empty() && a == slurp(root / "b" / f) && a == slurp(root / "c" / f);
    }
    report(11, same, "simulate reports byte-identical across two 1-thread runs and an 8-thread run");
  }
  fs::remove_all(root);
}

}  // namespace

int main() {
  try {
    reduction_identities();
    plug_in_identification();
    desk_study();
  } catch (const std::exception& e) {
    std::printf("ERROR  acceptance harness: %s\n", e.what());
    return 2;
  }
  int passed = 0, unexpected = 0;
  std::string known;
  for (const auto& v : verdicts) {
    if (v.pass) {
      ++passed;
    } else if (kKnownFailures.count(v.id)) {
      known += (known.empty() ? "" : ", ") + std::to_string(v.id);
    } else {
      ++unexpected;
    }
  }
  std::printf("SUMMARY  %d of %zu criteria pass", passed, verdicts.size());
  if (!known.empty()) std::printf("; known failure: %s", known.c_str());
  if (unexpected) std::printf("; %d unexpected failure(s)", unexpected);
  std::printf("\n");
  return unexpected ? 1 : 0;
}
