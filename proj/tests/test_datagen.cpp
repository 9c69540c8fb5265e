#include <doctest.h>

#include "bpcfl/datagen.hpp"
#include "support.hpp"

using namespace testing;

namespace {

bool in_union(double x, const std::vector<Interval>& iv) {
  for (const Interval& i : iv) {
    if (x >= i.lo && x <= i.hi) return true;
  }
  return false;
}

bool same(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && (a.array() == b.array()).all();
}

}  // namespace

TEST_CASE("regression ground truth at zero") { CHECK(regression_ground_truth(0.0) == 1.5); }

TEST_CASE("interval regression samples respect the intervals and proportions") {
  RegressionGenConfig cfg;
  cfg.seed = 3;
  const RegressionData d = gen_interval_regression(cfg);
  REQUIRE(d.shards.size() == 5);
  for (std::size_t m = 0; m < d.shards.size(); ++m) {
    const DatasetShard& s = d.shards[m];
    CHECK(s.client_id == static_cast<int>(m));
    CHECK(s.size() == 100);
    for (Index i = 0; i < s.size(); ++i) CHECK(in_union(s.inputs(i, 0), cfg.intervals));
    double sum = 0.0;
    for (double p : d.proportions[m]) {
      CHECK(p >= 0.0);
      sum += p;
    }
    CHECK(std::abs(sum - 1.0) <= 1e-12);
  }
  CHECK(d.test_inputs.rows() == 3 * 512);
  for (Index i = 0; i < d.test_inputs.rows(); ++i) {
    CHECK(in_union(d.test_inputs(i, 0), cfg.intervals));
    CHECK(d.test_targets(i, 0) == regression_ground_truth(d.test_inputs(i, 0)));
  }
  CHECK(d.span_inputs.rows() == 512);
  CHECK(d.span_inputs(0, 0) == -0.8);
  CHECK(d.span_inputs(511, 0) == 0.8);
}

TEST_CASE("noiseless regression targets equal the formula") {
  RegressionGenConfig cfg;
  cfg.noise_std = 0.0;
  const RegressionData d = gen_interval_regression(cfg);
  for (const DatasetShard& s : d.shards) {
    for (Index i = 0; i < s.size(); ++i) CHECK(s.targets(i, 0) == regression_ground_truth(s.inputs(i, 0)));
  }
}

TEST_CASE("regression residual std matches noise_std") {
  RegressionGenConfig cfg;
  cfg.num_clients = 10;
  cfg.points_per_client = 1500;
  cfg.seed = 8;
  const RegressionData d = gen_interval_regression(cfg);
  double ss = 0.0;
  Index n = 0;
  for (const DatasetShard& s : d.shards) {
    for (Index i = 0; i < s.size(); ++i) {
      const double r = s.targets(i, 0) - regression_ground_truth(s.inputs(i, 0));
      ss += r * r;
      ++n;
    }
  }
  REQUIRE(n >= 10000);
  CHECK(std::sqrt(ss / n) == doctest::Approx(0.3).epsilon(0.1));
}

TEST_CASE("generators are pure functions of their config") {
  RegressionGenConfig rc;
  rc.seed = 11;
  const RegressionData a = gen_interval_regression(rc);
  const RegressionData b = gen_interval_regression(rc);
  for (std::size_t m = 0; m < a.shards.size(); ++m) {
    CHECK(same(a.shards[m].inputs, b.shards[m].inputs));
    CHECK(same(a.shards[m].targets, b.shards[m].targets));
  }
  rc.seed = 12;
  CHECK_FALSE(same(a.shards[0].inputs, gen_interval_regression(rc).shards[0].inputs));

  MoonsGenConfig mc;
  mc.seed = 4;
  const auto m1 = gen_moons(mc);
  const auto m2 = gen_moons(mc);
  for (std::size_t m = 0; m < m1.size(); ++m) {
    CHECK(same(m1[m].inputs, m2[m].inputs));
    CHECK(same(m1[m].targets, m2[m].targets));
  }
}

TEST_CASE("config validation") {
  RegressionGenConfig rc;
  rc.intervals = {{0.5, 0.2}};
  rc.dirichlet_alpha = {1.0};
  CHECK_THROWS_AS(rc.validate(), InvalidArgument);
  RegressionGenConfig ra;
  ra.dirichlet_alpha = {1.0, 0.0, 1.0};
  CHECK_THROWS_AS(ra.validate(), InvalidArgument);
  MoonsGenConfig mc;
  mc.noise_std = -0.1;
  CHECK_THROWS_AS(mc.validate(), InvalidArgument);
}

TEST_CASE("noiseless moons lie on their arcs and in the box") {
  Rng rng(5);
  const LabeledPoints p = sample_moons(501, 0.0, rng);
  Index class0 = 0;
  for (Index i = 0; i < p.inputs.rows(); ++i) {
    const double x = p.inputs(i, 0), y = p.inputs(i, 1);
    CHECK(x >= -1.0);
    CHECK(x <= 2.0);
    CHECK(y >= -0.5);
    CHECK(y <= 1.0);
    if (p.targets(i, 0) == 1.0) {
      ++class0;
      CHECK(std::abs(x * x + y * y - 1.0) <= 1e-12);
      CHECK(y >= 0.0);
    } else {
      CHECK(p.targets(i, 1) == 1.0);
      CHECK(std::abs((1 - x) * (1 - x) + (0.5 - y) * (0.5 - y) - 1.0) <= 1e-12);
      CHECK(y <= 0.5);
    }
  }
  CHECK(std::abs(2 * class0 - 501) <= 1);
}

TEST_CASE("moons arc endpoints at t = 0") {
  // the arcs at t = 0 are (cos 0, sin 0) and (1 - cos 0, 0.5 - sin 0)
  CHECK(std::cos(0.0) == 1.0);
  Rng rng(0);
  const LabeledPoints p = sample_moons(2000, 0.0, rng);
  double best0 = 1e9, best1 = 1e9;
  for (Index i = 0; i < p.inputs.rows(); ++i) {
    const double x = p.inputs(i, 0), y = p.inputs(i, 1);
    if (p.targets(i, 0) == 1.0) {
      best0 = std::min(best0, std::hypot(x - 1.0, y));
    } else {
      best1 = std::min(best1, std::hypot(x, y - 0.5));
    }
  }
  CHECK(best0 <= 0.02);
  CHECK(best1 <= 0.02);
}

TEST_CASE("moon shards are balanced") {
  for (int n : {1, 2, 7, 20, 33}) {
    MoonsGenConfig mc;
    mc.points_per_client = n;
    mc.seed = static_cast<std::uint64_t>(n);
    for (const DatasetShard& s : gen_moons(mc)) {
      CHECK(s.size() == n);
      const double c0 = s.targets.col(0).sum();
      CHECK(std::abs(2 * c0 - n) <= 1.0);
    }
  }
}

TEST_CASE("train/test split") {
  Gen g(1);
  DatasetShard s;
  s.inputs = g.matrix(10, 2);
  s.targets = g.matrix(10, 1);
  const DatasetShard a = split_train_test(s, 0.2, 7);
  const DatasetShard b = split_train_test(s, 0.2, 7);
  REQUIRE(a.is_test.size() == 10);
  int tests = 0;
  for (bool t : a.is_test) tests += t;
  CHECK(tests == 2);
  CHECK(a.is_test == b.is_test);
  CHECK(a.train_size() == 8);
  CHECK(a.train_inputs().rows() + a.test_inputs().rows() == 10);
  // every row lands in exactly one partition
  std::vector<int> seen(10, 0);
  for (Index i = 0; i < 10; ++i) seen[i] += a.is_test[i] ? 1 : 0;
  for (Index i = 0; i < 10; ++i) seen[i] += a.is_test[i] ? 0 : 1;
  for (int v : seen) CHECK(v == 1);

  DatasetShard one;
  one.inputs = g.matrix(1, 1);
  one.targets = g.matrix(1, 1);
  CHECK_THROWS_AS(split_train_test(one, 0.9, 1), InvalidArgument);
  CHECK_THROWS_AS(split_train_test(s, 0.0, 1), InvalidArgument);
  CHECK_THROWS_AS(split_train_test(s, 1.0, 1), InvalidArgument);
}
