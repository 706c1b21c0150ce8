#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <ranges>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "crtgen/csv.hpp"
#include "crtgen/error.hpp"

namespace crtgen {

using Arm = int;

/// One cluster of the trial-eligible cohort: cluster-level covariates x,
/// the N_j x p matrix of individual covariates, the selection flag, and (for
/// randomized clusters only) the assigned arm and individual outcomes.
class ClusterRecord {
 public:
  ClusterRecord(std::string id, std::vector<double> x, Eigen::MatrixXd w, bool selected,
                std::optional<Arm> arm = std::nullopt,
                std::optional<std::vector<double>> y = std::nullopt,
                std::optional<double> design_p = std::nullopt)
      : id_(std::move(id)),
        x_(std::move(x)),
        w_(std::move(w)),
        s_(selected),
        a_(arm),
        y_(std::move(y)),
        design_p_(design_p) {
    if (w_.rows() < 1) throw DataError("cluster " + id_ + ": at least one individual required");
    if (s_ && (!a_ || !y_)) throw DataError("cluster " + id_ + ": randomized cluster lacks treatment or outcome");
    if (!s_ && a_) throw DataError("cluster " + id_ + ": treatment present for non-randomized cluster");
    if (!s_ && y_) throw DataError("cluster " + id_ + ": outcome present for non-randomized cluster");
    if (y_ && static_cast<Eigen::Index>(y_->size()) != w_.rows())
      throw DataError("cluster " + id_ + ": outcome length does not match individual count");
    w_means_.resize(static_cast<std::size_t>(w_.cols()));
    for (Eigen::Index k = 0; k < w_.cols(); ++k) w_means_[static_cast<std::size_t>(k)] = w_.col(k).mean();
    if (y_) ybar_ = std::accumulate(y_->begin(), y_->end(), 0.0) / static_cast<double>(y_->size());
  }

  const std::string& id() const noexcept { return id_; }
  std::span<const double> x() const noexcept { return x_; }
  const Eigen::MatrixXd& w() const noexcept { return w_; }
  std::size_t n_individuals() const noexcept { return static_cast<std::size_t>(w_.rows()); }
  bool s() const noexcept { return s_; }
  const std::optional<Arm>& a() const noexcept { return a_; }
  const std::optional<std::vector<double>>& y() const noexcept { return y_; }
  const std::optional<double>& design_p() const noexcept { return design_p_; }

  /// Column means of w (the per-cluster individual-covariate summaries).
  std::span<const double> w_means() const noexcept { return w_means_; }

  /// Cached cluster-average outcome; 0 for non-randomized clusters.
  double ybar_or_zero() const noexcept { return ybar_; }

  bool in_arm(Arm arm) const noexcept { return s_ && *a_ == arm; }

  ClusterRecord with_design_p(std::optional<double> p) const {
    ClusterRecord copy = *this;
    copy.design_p_ = p;
    return copy;
  }

 private:
  std::string id_;
  std::vector<double> x_;
  Eigen::MatrixXd w_;
  bool s_;
  std::optional<Arm> a_;
  std::optional<std::vector<double>> y_;
  std::optional<double> design_p_;
  std::vector<double> w_means_;
  double ybar_ = 0.0;
};

/// Mean of the individual outcomes of a randomized cluster.
inline double cluster_average_outcome(const ClusterRecord& record) {
  if (!record.s() || !record.y()) throw DataError("cluster " + record.id() + ": no outcome for non-randomized cluster");
  const auto& y = *record.y();
  return std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
}

/// The cohort of trial-eligible clusters. Records are shared and immutable;
/// a dataset is an ordered view over them, which makes cluster resampling a
/// copy of indices rather than of individual-level data.
class ClusterDataset {
 public:
  ClusterDataset() : storage_(std::make_shared<Storage>()) {}

  explicit ClusterDataset(std::vector<ClusterRecord> records, std::vector<Arm> treatment_levels = {},
                          std::vector<std::string> x_names = {}, std::vector<std::string> w_names = {}) {
    auto st = std::make_shared<Storage>();
    if (!records.empty()) {
      st->q = records.front().x().size();
      st->p = static_cast<std::size_t>(records.front().w().cols());
    }
    for (const auto& r : records) {
      if (r.x().size() != st->q) throw DataError("cluster " + r.id() + ": cluster covariate dimension differs");
      if (static_cast<std::size_t>(r.w().cols()) != st->p)
        throw DataError("cluster " + r.id() + ": individual covariate dimension differs");
    }
    if (treatment_levels.empty()) {
      std::set<Arm> seen;
      for (const auto& r : records)
        if (r.a()) seen.insert(*r.a());
      treatment_levels.assign(seen.begin(), seen.end());
    } else {
      std::sort(treatment_levels.begin(), treatment_levels.end());
      treatment_levels.erase(std::unique(treatment_levels.begin(), treatment_levels.end()), treatment_levels.end());
    }
    if (x_names.empty())
      for (std::size_t k = 0; k < st->q; ++k) x_names.push_back("x_" + std::to_string(k + 1));
    if (w_names.empty())
      for (std::size_t k = 0; k < st->p; ++k) w_names.push_back("w_" + std::to_string(k + 1));
    if (x_names.size() != st->q || w_names.size() != st->p) throw DataError("covariate name count mismatch");
    st->records = std::move(records);
    st->levels = std::move(treatment_levels);
    st->x_names = std::move(x_names);
    st->w_names = std::move(w_names);
    rows_.resize(st->records.size());
    std::iota(rows_.begin(), rows_.end(), std::uint32_t{0});
    storage_ = std::move(st);
  }

  std::size_t size() const noexcept { return rows_.size(); }
  bool empty() const noexcept { return rows_.empty(); }
  const ClusterRecord& operator[](std::size_t j) const { return storage_->records[rows_[j]]; }

  auto records() const {
    return rows_ | std::views::transform([st = storage_.get()](std::uint32_t i) -> const ClusterRecord& {
             return st->records[i];
           });
  }

  std::span<const Arm> treatment_levels() const noexcept { return storage_->levels; }
  std::size_t x_dim() const noexcept { return storage_->q; }
  std::size_t w_dim() const noexcept { return storage_->p; }
  const std::vector<std::string>& x_names() const noexcept { return storage_->x_names; }
  const std::vector<std::string>& w_names() const noexcept { return storage_->w_names; }

  /// Index of cluster j in the underlying shared storage.
  std::uint32_t storage_row(std::size_t j) const { return rows_[j]; }

  /// A dataset whose j-th cluster is this dataset's picks[j]-th cluster.
  ClusterDataset resample(std::span<const std::uint32_t> picks) const {
    ClusterDataset out;
    out.storage_ = storage_;
    out.rows_.reserve(picks.size());
    for (auto k : picks) {
      if (k >= rows_.size()) throw std::out_of_range("resample index out of range");
      out.rows_.push_back(rows_[k]);
    }
    return out;
  }

  std::size_t count_selected() const {
    return static_cast<std::size_t>(std::ranges::count_if(records(), [](const auto& r) { return r.s(); }));
  }
  std::size_t count_arm(Arm arm) const {
    return static_cast<std::size_t>(std::ranges::count_if(records(), [arm](const auto& r) { return r.in_arm(arm); }));
  }

 private:
  struct Storage {
    std::vector<ClusterRecord> records;
    std::vector<Arm> levels;
    std::size_t q = 0;
    std::size_t p = 0;
    std::vector<std::string> x_names;
    std::vector<std::string> w_names;
  };
  std::shared_ptr<const Storage> storage_;
  std::vector<std::uint32_t> rows_;
};

// ---------------------------------------------------------------------------
// Validation

struct ValidationIssue {
  std::string cluster_id;  // empty for dataset-level issues
  std::string rule;
  std::string message;
};

struct ValidationReport {
  std::vector<ValidationIssue> errors;
  std::vector<ValidationIssue> warnings;
  bool ok() const noexcept { return errors.empty(); }
};

namespace detail {
inline std::string format_number(double v) {
  if (v == std::floor(v) && std::abs(v) < 1e15) return std::to_string(static_cast<long long>(v));
  return csv::format_double(v);
}
}  // namespace detail

/// Structural checks (errors) and empirical positivity on the discrete
/// cluster-level covariates (warnings). A covariate column counts as discrete
/// when every value is integral.
inline ValidationReport validate(const ClusterDataset& ds) {
  ValidationReport rep;
  const std::size_t m = ds.size();
  if (m < 2) rep.errors.push_back({"", "cluster_count", "at least 2 clusters required, got " + std::to_string(m)});

  std::set<std::string> ids;
  for (const auto& r : ds.records())
    if (!ids.insert(r.id()).second) rep.errors.push_back({r.id(), "duplicate_id", "duplicate cluster_id " + r.id()});

  const auto levels = ds.treatment_levels();
  for (const auto& r : ds.records()) {
    if (r.a() && std::find(levels.begin(), levels.end(), *r.a()) == levels.end())
      rep.errors.push_back({r.id(), "unknown_treatment", "treatment " + std::to_string(*r.a()) + " not in treatment set"});
    bool finite = std::all_of(r.x().begin(), r.x().end(), [](double v) { return std::isfinite(v); }) &&
                  r.w().allFinite();
    if (r.y()) finite = finite && std::all_of(r.y()->begin(), r.y()->end(), [](double v) { return std::isfinite(v); });
    if (r.design_p()) {
      double p = *r.design_p();
      if (!(p >= 0.0 && p <= 1.0))
        rep.errors.push_back({r.id(), "design_probability", "sampling probability outside [0,1]"});
    }
    if (!finite) rep.errors.push_back({r.id(), "non_finite", "non-finite covariate or outcome value"});
  }

  const std::size_t n_sel = ds.count_selected();
  if (m > 0 && n_sel == 0) rep.errors.push_back({"", "no_trial_clusters", "no randomized (s=1) clusters"});
  if (m > 0 && n_sel == m)
    rep.warnings.push_back({"", "no_nonrandomized_clusters", "no non-randomized (s=0) clusters; S=0 estimands undefined"});
  if (n_sel > 0) {
    std::size_t arms_seen = 0;
    for (Arm a : levels) {
      if (ds.count_arm(a) == 0)
        rep.warnings.push_back({"", "empty_arm", "no randomized clusters in arm " + std::to_string(a)});
      else
        ++arms_seen;
    }
    if (arms_seen < 2) rep.warnings.push_back({"", "single_arm", "fewer than 2 treatment levels among randomized clusters"});
  }

  // Empirical positivity on discrete covariate patterns.
  std::vector<std::size_t> discrete;
  for (std::size_t k = 0; k < ds.x_dim(); ++k) {
    bool integral = m > 0;
    for (const auto& r : ds.records())
      if (!std::isfinite(r.x()[k]) || r.x()[k] != std::floor(r.x()[k])) {
        integral = false;
        break;
      }
    if (integral) discrete.push_back(k);
  }
  if (!discrete.empty() && n_sel > 0) {
    using Pattern = std::vector<double>;
    std::map<Pattern, std::size_t> unsel, sel;
    std::map<Pattern, std::set<Arm>> arms;
    for (const auto& r : ds.records()) {
      Pattern pat;
      for (auto k : discrete) pat.push_back(r.x()[k]);
      if (r.s()) {
        ++sel[pat];
        arms[pat].insert(*r.a());
      } else {
        ++unsel[pat];
      }
    }
    auto describe = [&](const Pattern& pat) {
      std::string out;
      if (pat.size() > 1) out += "(";
      for (std::size_t i = 0; i < pat.size(); ++i) {
        if (i) out += ", ";
        out += ds.x_names()[discrete[i]] + "=" + detail::format_number(pat[i]);
      }
      if (pat.size() > 1) out += ")";
      return out;
    };
    for (const auto& [pat, count] : unsel)
      if (!sel.contains(pat))
        rep.warnings.push_back({"", "positivity_selection", "no randomized support for " + describe(pat)});
    for (const auto& [pat, got] : arms)
      for (Arm a : levels)
        if (!got.contains(a) && levels.size() > 1)
          rep.warnings.push_back({"", "positivity_treatment",
                                  "no randomized clusters in arm " + std::to_string(a) + " for " + describe(pat)});
  }
  return rep;
}

// ---------------------------------------------------------------------------
// CSV ingestion

inline constexpr const char* kDesignProbabilityColumn = "sampling_prob";

/// Joins clusters.csv (cluster_id, s, a, covariates[, sampling_prob]) with
/// individuals.csv (cluster_id, covariates[, y]). Empty a/y cells encode
/// absence. Individual row order is preserved within each cluster.
inline ClusterDataset load_dataset(std::istream& clusters_in, std::istream& individuals_in) {
  csv::Reader creader(clusters_in);
  auto cheader = creader.next();
  if (!cheader) throw DataError("clusters table is empty");
  for (auto& h : *cheader) h = std::string(csv::trim(h));
  auto find_col = [](const csv::Row& header, std::string_view name) -> std::optional<std::size_t> {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    return std::nullopt;
  };
  auto cid = find_col(*cheader, "cluster_id");
  auto cs = find_col(*cheader, "s");
  auto ca = find_col(*cheader, "a");
  auto cp = find_col(*cheader, kDesignProbabilityColumn);
  if (!cid || !cs) throw DataError("clusters table requires columns cluster_id and s");
  std::vector<std::size_t> xcols;
  std::vector<std::string> xnames;
  for (std::size_t i = 0; i < cheader->size(); ++i)
    if (i != *cid && i != *cs && (!ca || i != *ca) && (!cp || i != *cp)) {
      xcols.push_back(i);
      xnames.push_back((*cheader)[i]);
    }

  struct Pending {
    std::string id;
    bool s;
    std::optional<Arm> a;
    std::optional<double> p;
    std::vector<double> x;
    std::vector<std::vector<double>> w_rows;
    std::vector<std::optional<double>> y;
  };
  std::vector<Pending> pending;
  std::unordered_map<std::string, std::size_t> index;

  while (auto row = creader.next()) {
    const auto line = std::to_string(creader.line());
    if (row->size() != cheader->size())
      throw DataError("clusters table line " + line + ": expected " + std::to_string(cheader->size()) + " fields");
    Pending pc;
    pc.id = std::string(csv::trim((*row)[*cid]));
    if (pc.id.empty()) throw DataError("clusters table line " + line + ": missing cluster_id");
    auto sv = csv::parse_int((*row)[*cs]);
    if (!sv || (*sv != 0 && *sv != 1)) throw DataError("cluster " + pc.id + ": s must be 0 or 1");
    pc.s = *sv == 1;
    if (ca && !csv::trim((*row)[*ca]).empty()) {
      auto av = csv::parse_int((*row)[*ca]);
      if (!av) throw DataError("cluster " + pc.id + ": treatment label must be an integer");
      pc.a = static_cast<Arm>(*av);
    }
    if (cp && !csv::trim((*row)[*cp]).empty()) {
      auto pv = csv::parse_double((*row)[*cp]);
      if (!pv) throw DataError("cluster " + pc.id + ": non-numeric sampling probability");
      pc.p = *pv;
    }
    for (std::size_t k = 0; k < xcols.size(); ++k) {
      const auto& cell = (*row)[xcols[k]];
      if (csv::trim(cell).empty()) throw DataError("cluster " + pc.id + ": missing covariate " + xnames[k]);
      auto v = csv::parse_double(cell);
      if (!v) throw DataError("cluster " + pc.id + ": non-numeric covariate " + xnames[k]);
      pc.x.push_back(*v);
    }
    if (!pc.s && pc.a) throw DataError("cluster " + pc.id + ": treatment present for non-randomized cluster");
    if (pc.s && !pc.a) throw DataError("cluster " + pc.id + ": randomized cluster lacks treatment");
    if (!index.emplace(pc.id, pending.size()).second) throw DataError("duplicate cluster_id " + pc.id);
    pending.push_back(std::move(pc));
  }

  csv::Reader ireader(individuals_in);
  auto iheader = ireader.next();
  if (!iheader) throw DataError("individuals table is empty");
  for (auto& h : *iheader) h = std::string(csv::trim(h));
  auto iid = find_col(*iheader, "cluster_id");
  auto iy = find_col(*iheader, "y");
  if (!iid) throw DataError("individuals table requires column cluster_id");
  std::vector<std::size_t> wcols;
  std::vector<std::string> wnames;
  for (std::size_t i = 0; i < iheader->size(); ++i)
    if (i != *iid && (!iy || i != *iy)) {
      wcols.push_back(i);
      wnames.push_back((*iheader)[i]);
    }
  while (auto row = ireader.next()) {
    const auto line = std::to_string(ireader.line());
    if (row->size() != iheader->size())
      throw DataError("individuals table line " + line + ": expected " + std::to_string(iheader->size()) + " fields");
    std::string id(csv::trim((*row)[*iid]));
    auto it = index.find(id);
    if (it == index.end()) throw DataError("individuals table line " + line + ": orphan individual (unknown cluster_id '" + id + "')");
    Pending& pc = pending[it->second];
    std::vector<double> w;
    w.reserve(wcols.size());
    for (std::size_t k = 0; k < wcols.size(); ++k) {
      const auto& cell = (*row)[wcols[k]];
      if (csv::trim(cell).empty()) throw DataError("individuals table line " + line + ": missing covariate " + wnames[k]);
      auto v = csv::parse_double(cell);
      if (!v) throw DataError("individuals table line " + line + ": non-numeric covariate " + wnames[k]);
      w.push_back(*v);
    }
    pc.w_rows.push_back(std::move(w));
    std::optional<double> y;
    if (iy && !csv::trim((*row)[*iy]).empty()) {
      y = csv::parse_double((*row)[*iy]);
      if (!y) throw DataError("individuals table line " + line + ": non-numeric outcome");
    }
    pc.y.push_back(y);
  }

  std::vector<ClusterRecord> records;
  records.reserve(pending.size());
  for (auto& pc : pending) {
    if (pc.w_rows.empty()) throw DataError("cluster " + pc.id + ": no individuals (missing join key)");
    Eigen::MatrixXd w(static_cast<Eigen::Index>(pc.w_rows.size()), static_cast<Eigen::Index>(wcols.size()));
    for (std::size_t i = 0; i < pc.w_rows.size(); ++i)
      for (std::size_t k = 0; k < wcols.size(); ++k)
        w(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = pc.w_rows[i][k];
    const bool any_y = std::any_of(pc.y.begin(), pc.y.end(), [](const auto& v) { return v.has_value(); });
    const bool all_y = std::all_of(pc.y.begin(), pc.y.end(), [](const auto& v) { return v.has_value(); });
    std::optional<std::vector<double>> y;
    if (!pc.s && any_y) throw DataError("cluster " + pc.id + ": outcome present for non-randomized cluster");
    if (pc.s) {
      if (!all_y) throw DataError("cluster " + pc.id + ": randomized cluster lacks outcome");
      y.emplace();
      for (const auto& v : pc.y) y->push_back(*v);
    }
    records.emplace_back(pc.id, std::move(pc.x), std::move(w), pc.s, pc.a, std::move(y), pc.p);
  }
  return ClusterDataset(std::move(records), {}, std::move(xnames), std::move(wnames));
}

inline ClusterDataset load_dataset(const std::string& clusters_path, const std::string& individuals_path) {
  std::ifstream c(clusters_path), i(individuals_path);
  if (!c) throw DataError("cannot open " + clusters_path);
  if (!i) throw DataError("cannot open " + individuals_path);
  return load_dataset(c, i);
}

/// Writes the two-table CSV form read by load_dataset.
inline void write_dataset(const ClusterDataset& ds, std::ostream& clusters_out, std::ostream& individuals_out) {
  bool has_p = std::ranges::any_of(ds.records(), [](const auto& r) { return r.design_p().has_value(); });
  csv::Row header{"cluster_id", "s", "a"};
  for (const auto& n : ds.x_names()) header.push_back(n);
  if (has_p) header.push_back(kDesignProbabilityColumn);
  csv::write_row(clusters_out, header);
  csv::Row iheader{"cluster_id"};
  for (const auto& n : ds.w_names()) iheader.push_back(n);
  iheader.push_back("y");
  csv::write_row(individuals_out, iheader);
  for (const auto& r : ds.records()) {
    csv::Row row{r.id(), r.s() ? "1" : "0", r.a() ? std::to_string(*r.a()) : ""};
    for (double v : r.x()) row.push_back(csv::format_double(v));
    if (has_p) row.push_back(r.design_p() ? csv::format_double(*r.design_p()) : "");
    csv::write_row(clusters_out, row);
    for (Eigen::Index i = 0; i < r.w().rows(); ++i) {
      csv::Row irow{r.id()};
      for (Eigen::Index k = 0; k < r.w().cols(); ++k) irow.push_back(csv::format_double(r.w()(i, k)));
      irow.push_back(r.y() ? csv::format_double((*r.y())[static_cast<std::size_t>(i)]) : "");
      csv::write_row(individuals_out, irow);
    }
  }
}

}  // namespace crtgen
