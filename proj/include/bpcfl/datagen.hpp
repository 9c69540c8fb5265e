#pragma once

#include <utility>
#include <vector>

#include "bpcfl/shard.hpp"

namespace bpcfl {

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

// Noisy samples of 1.5 sin(0.4 pi x) + 1.5 cos(2 pi x) on a union of
// intervals; each client mixes intervals with Dirichlet(alpha) proportions.
struct RegressionGenConfig {
  std::vector<Interval> intervals{{-0.8, -0.6}, {-0.2, 0.0}, {0.5, 0.8}};
  double noise_std = 0.3;
  int num_clients = 5;
  int points_per_client = 100;
  std::vector<double> dirichlet_alpha{1.0, 1.0, 1.0};
  int grid_points_per_interval = 512;
  int span_grid_points = 512;
  std::uint64_t seed = 0;

  void validate() const;
};

struct MoonsGenConfig {
  int points_per_client = 20;
  int num_clients = 5;
  double noise_std = 0.14;
  std::uint64_t seed = 0;

  void validate() const;
};

double regression_ground_truth(double x);

struct RegressionData {
  std::vector<DatasetShard> shards;
  std::vector<std::vector<double>> proportions;  // per client, over intervals
  Matrix test_inputs;    // evenly spaced noiseless grid inside the intervals
  Matrix test_targets;
  Matrix span_inputs;    // evenly spaced grid over [min lo, max hi], gaps included
  Matrix span_targets;
};

RegressionData gen_interval_regression(const RegressionGenConfig& cfg);

std::vector<DatasetShard> gen_moons(const MoonsGenConfig& cfg);

struct LabeledPoints {
  Matrix inputs;   // n x 2
  Matrix targets;  // n x 2 one-hot
};

// Moons sample with balanced classes (counts differ by at most one).
LabeledPoints sample_moons(int n, double noise_std, Rng& rng);

// Seeded uniform split withholding round(fraction * n) rows for testing.
DatasetShard split_train_test(const DatasetShard& shard, double fraction, std::uint64_t seed);

}  // namespace bpcfl
