#include <catch_amalgamated.hpp>

#include <algorithm>
#include <random>
#include <sstream>

#include "crtgen/data_model.hpp"

using namespace crtgen;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;

namespace {

Eigen::MatrixXd col(std::initializer_list<double> v) {
  Eigen::MatrixXd w(static_cast<Eigen::Index>(v.size()), 1);
  Eigen::Index i = 0;
  for (double x : v) w(i++, 0) = x;
  return w;
}

ClusterRecord trial(std::string id, double x, std::vector<double> y, Arm a = 1) {
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(y.size()), 1);
  return ClusterRecord(std::move(id), {x}, w, true, a, std::move(y));
}

ClusterRecord outside(std::string id, double x, std::size_t n = 2) {
  return ClusterRecord(std::move(id), {x}, Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), 1), false);
}

}  // namespace

TEST_CASE("load_dataset joins the two tables", "[data_model]") {
  std::istringstream clusters("cluster_id,s,a,x_1\nc1,1,1,0\nc2,0,,1\n");
  std::istringstream individuals("cluster_id,w_1,y\nc1,0.5,1\nc1,-0.5,0\nc2,1.0,\nc1,2.0,1\nc2,3.0,\n");
  auto ds = load_dataset(clusters, individuals);
  REQUIRE(ds.size() == 2);
  CHECK(ds[0].n_individuals() == 3);
  CHECK(ds[1].n_individuals() == 2);
  // individual order follows the individuals table
  CHECK(ds[0].w()(2, 0) == 2.0);
  CHECK(ds[1].w()(1, 0) == 3.0);
  CHECK(ds[0].a() == 1);
  CHECK_FALSE(ds[1].a().has_value());
  CHECK_THAT(cluster_average_outcome(ds[0]), WithinAbs(2.0 / 3.0, 1e-15));
  CHECK(ds.x_names() == std::vector<std::string>{"x_1"});
  CHECK(ds.treatment_levels().size() == 1);
}

TEST_CASE("load_dataset rejects broken inputs", "[data_model]") {
  auto load = [](std::string c, std::string i) {
    std::istringstream cs(c), is(i);
    return load_dataset(cs, is);
  };
  SECTION("orphan individual") {
    CHECK_THROWS_WITH(load("cluster_id,s,a,x\nc1,1,1,0\n", "cluster_id,w,y\nc1,0,1\nzz,0,1\n"),
                      ContainsSubstring("orphan individual"));
  }
  SECTION("outcome on a non-randomized cluster") {
    CHECK_THROWS_WITH(load("cluster_id,s,a,x\nc1,0,,0\n", "cluster_id,w,y\nc1,0,1\n"),
                      ContainsSubstring("outcome present for non-randomized cluster"));
  }
  SECTION("treatment on a non-randomized cluster") {
    CHECK_THROWS_WITH(load("cluster_id,s,a,x\nc1,0,1,0\n", "cluster_id,w,y\nc1,0,\n"),
                      ContainsSubstring("treatment present"));
  }
  SECTION("randomized cluster without treatment") {
    CHECK_THROWS_AS(load("cluster_id,s,a,x\nc1,1,,0\n", "cluster_id,w,y\nc1,0,1\n"), DataError);
  }
  SECTION("randomized cluster with a missing outcome") {
    CHECK_THROWS_WITH(load("cluster_id,s,a,x\nc1,1,0,0\n", "cluster_id,w,y\nc1,0,1\nc1,0,\n"),
                      ContainsSubstring("lacks outcome"));
  }
  SECTION("cluster with no individuals") {
    CHECK_THROWS_WITH(load("cluster_id,s,a,x\nc1,1,0,0\nc2,0,,1\n", "cluster_id,w,y\nc1,0,1\n"),
                      ContainsSubstring("no individuals"));
  }
  SECTION("non-numeric covariate") {
    CHECK_THROWS_WITH(load("cluster_id,s,a,x\nc1,1,0,abc\n", "cluster_id,w,y\nc1,0,1\n"),
                      ContainsSubstring("non-numeric covariate"));
  }
  SECTION("missing covariate cell") {
    CHECK_THROWS_WITH(load("cluster_id,s,a,x\nc1,1,0,0\n", "cluster_id,w,y\nc1,,1\n"),
                      ContainsSubstring("missing covariate"));
  }
  SECTION("ragged individual row") {
    CHECK_THROWS_WITH(load("cluster_id,s,a,x\nc1,1,0,0\n", "cluster_id,w1,w2,y\nc1,0,1\n"),
                      ContainsSubstring("expected 4 fields"));
  }
  SECTION("bad selection flag") {
    CHECK_THROWS_WITH(load("cluster_id,s,a,x\nc1,2,0,0\n", "cluster_id,w,y\nc1,0,1\n"),
                      ContainsSubstring("s must be 0 or 1"));
  }
}

TEST_CASE("record invariants are enforced at construction", "[data_model]") {
  CHECK_THROWS_AS(ClusterRecord("c", {0.0}, Eigen::MatrixXd(0, 1), false), DataError);
  CHECK_THROWS_AS(ClusterRecord("c", {0.0}, col({1, 2}), true, 1, std::vector<double>{1.0}), DataError);
  CHECK_THROWS_AS(ClusterRecord("c", {0.0}, col({1, 2}), false, std::nullopt, std::vector<double>{1.0, 0.0}),
                  DataError);
  CHECK_THROWS_AS(ClusterDataset({trial("a", 0, {1}), ClusterRecord("b", {0.0, 1.0}, col({1}), false)}), DataError);
}

TEST_CASE("cluster_average_outcome", "[data_model]") {
  CHECK(cluster_average_outcome(trial("a", 0, {1, 0, 1, 0})) == 0.5);
  CHECK(cluster_average_outcome(trial("a", 0, {0, 0, 0})) == 0.0);
  CHECK_THAT(cluster_average_outcome(trial("a", 0, {0.2, 0.4, 0.9})), WithinAbs(0.5, 1e-15));
  CHECK_THROWS_AS(cluster_average_outcome(outside("b", 0)), DataError);
}

TEST_CASE("cluster_average_outcome is permutation invariant", "[data_model][property]") {
  std::mt19937_64 eng(7);
  std::uniform_real_distribution<double> u(-3, 3);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<double> y(1 + rep % 17);
    for (auto& v : y) v = u(eng);
    const double base = cluster_average_outcome(trial("a", 0, y));
    std::shuffle(y.begin(), y.end(), eng);
    CHECK_THAT(cluster_average_outcome(trial("a", 0, y)), WithinAbs(base, 1e-14));
  }
}

TEST_CASE("validate reports structure and positivity", "[data_model]") {
  SECTION("fully valid dataset gives an empty report") {
    ClusterDataset ds({trial("a", 0, {1, 0}, 1), trial("b", 0, {0}, 0), trial("c", 1, {1}, 1), trial("d", 1, {0}, 0),
                       outside("e", 0), outside("f", 1)});
    auto rep = validate(ds);
    CHECK(rep.errors.empty());
    CHECK(rep.warnings.empty());
  }
  SECTION("x=1 only among non-randomized clusters") {
    ClusterDataset ds({trial("a", 0, {1}, 1), trial("b", 0, {0}, 0), outside("c", 1), outside("d", 0)},
                      {}, {"x"});
    auto rep = validate(ds);
    CHECK(rep.errors.empty());
    REQUIRE(rep.warnings.size() == 1);
    CHECK(rep.warnings[0].message == "no randomized support for x=1");
  }
  SECTION("duplicate cluster id is an error") {
    ClusterDataset ds({trial("a", 0, {1}, 1), trial("a", 0, {0}, 0), outside("c", 0)});
    auto rep = validate(ds);
    REQUIRE(rep.errors.size() == 1);
    CHECK(rep.errors[0].rule == "duplicate_id");
    CHECK(rep.errors[0].cluster_id == "a");
  }
  SECTION("continuous covariates are not checked for positivity") {
    ClusterDataset ds({trial("a", 0.5, {1}, 1), trial("b", 0.25, {0}, 0), outside("c", 0.75)});
    CHECK(validate(ds).warnings.empty());
  }
  SECTION("missing trial clusters and too few clusters") {
    ClusterDataset ds({outside("c", 0)});
    auto rep = validate(ds);
    CHECK(rep.errors.size() == 2);
  }
  SECTION("no S=0 clusters is only a warning") {
    ClusterDataset ds({trial("a", 0, {1}, 1), trial("b", 0, {0}, 0)});
    auto rep = validate(ds);
    CHECK(rep.ok());
    REQUIRE(rep.warnings.size() == 1);
    CHECK(rep.warnings[0].rule == "no_nonrandomized_clusters");
  }
}

TEST_CASE("validate does not mutate its input", "[data_model]") {
  ClusterDataset ds({trial("a", 0, {1}, 1), trial("a", 0, {0}, 0), outside("c", 1)});
  std::ostringstream c1, i1, c2, i2;
  write_dataset(ds, c1, i1);
  (void)validate(ds);
  write_dataset(ds, c2, i2);
  CHECK(c1.str() == c2.str());
  CHECK(i1.str() == i2.str());
}

TEST_CASE("write then load is the identity on accepted datasets", "[data_model][property]") {
  std::mt19937_64 eng(11);
  std::normal_distribution<double> n01;
  std::bernoulli_distribution coin(0.5);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<ClusterRecord> recs;
    const int m = 2 + rep % 5;
    for (int j = 0; j < m; ++j) {
      const Eigen::Index nj = 1 + (j * 7 + rep) % 4;
      Eigen::MatrixXd w(nj, 2);
      for (Eigen::Index i = 0; i < nj; ++i) w(i, 0) = n01(eng), w(i, 1) = n01(eng);
      std::vector<double> x{static_cast<double>(coin(eng)), n01(eng)};
      const bool s = (j % 2 == 0);
      std::optional<std::vector<double>> y;
      if (s) {
        y.emplace();
        for (Eigen::Index i = 0; i < nj; ++i) y->push_back(coin(eng) ? 1.0 : n01(eng));
      }
      std::optional<double> p = rep % 2 ? std::optional<double>(0.1 + 0.01 * j) : std::nullopt;
      recs.emplace_back("c" + std::to_string(j), x, w, s, s ? std::optional<Arm>(j % 4 == 0) : std::nullopt, y, p);
    }
    ClusterDataset ds(std::move(recs));
    std::stringstream c, i;
    write_dataset(ds, c, i);
    auto back = load_dataset(c, i);
    REQUIRE(back.size() == ds.size());
    for (std::size_t j = 0; j < ds.size(); ++j) {
      CHECK(back[j].id() == ds[j].id());
      CHECK(std::ranges::equal(back[j].x(), ds[j].x()));
      CHECK(back[j].w() == ds[j].w());
      CHECK(back[j].s() == ds[j].s());
      CHECK(back[j].a() == ds[j].a());
      CHECK(back[j].y() == ds[j].y());
      CHECK(back[j].design_p() == ds[j].design_p());
    }
  }
}

TEST_CASE("resample shares records and keeps cluster data intact", "[data_model]") {
  ClusterDataset ds({trial("a", 0, {1, 1}, 1), trial("b", 1, {0}, 0), outside("c", 1, 3)});
  std::vector<std::uint32_t> picks{2, 2, 0};
  auto r = ds.resample(picks);
  REQUIRE(r.size() == 3);
  CHECK(&r[0] == &ds[2]);
  CHECK(r[1].id() == "c");
  CHECK(r[2].n_individuals() == 2);
  CHECK(r.count_selected() == 1);
  CHECK(r.treatment_levels().size() == 2);
}
