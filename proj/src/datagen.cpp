#include "bpcfl/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace bpcfl {

namespace {

Matrix select_rows(const Matrix& m, const std::vector<bool>& mask, bool value) {
  Index count = 0;
  for (bool b : mask) count += (b == value);
  Matrix out(count, m.cols());
  Index r = 0;
  for (Index i = 0; i < m.rows(); ++i) {
    if (mask[i] == value) out.row(r++) = m.row(i);
  }
  return out;
}

}  // namespace

Index DatasetShard::train_size() const {
  if (is_test.empty()) return size();
  return static_cast<Index>(std::count(is_test.begin(), is_test.end(), false));
}

Matrix DatasetShard::train_inputs() const { return is_test.empty() ? inputs : select_rows(inputs, is_test, false); }
Matrix DatasetShard::train_targets() const {
  return is_test.empty() ? targets : select_rows(targets, is_test, false);
}
Matrix DatasetShard::test_inputs() const {
  return is_test.empty() ? Matrix(0, inputs.cols()) : select_rows(inputs, is_test, true);
}
Matrix DatasetShard::test_targets() const {
  return is_test.empty() ? Matrix(0, targets.cols()) : select_rows(targets, is_test, true);
}

void DatasetShard::validate() const {
  if (inputs.rows() < 1) throw InvalidArgument("shard of client " + std::to_string(client_id) + " is empty");
  if (targets.rows() != inputs.rows()) throw InvalidArgument("shard inputs/targets row mismatch");
  if (!is_test.empty() && static_cast<Index>(is_test.size()) != inputs.rows()) {
    throw InvalidArgument("shard split mask has wrong length");
  }
}

void RegressionGenConfig::validate() const {
  if (intervals.empty()) throw InvalidArgument("at least one interval required");
  for (const Interval& iv : intervals) {
    if (!(iv.lo < iv.hi)) throw InvalidArgument("interval lo must be below hi");
  }
  if (dirichlet_alpha.size() != intervals.size()) throw InvalidArgument("dirichlet_alpha must match intervals");
  for (double a : dirichlet_alpha) {
    if (!(a > 0.0)) throw InvalidArgument("dirichlet_alpha entries must be positive");
  }
  if (!(noise_std >= 0.0)) throw InvalidArgument("noise_std must be non-negative");
  if (num_clients < 1 || points_per_client < 1) throw InvalidArgument("need at least one client and one point");
  if (grid_points_per_interval < 2 || span_grid_points < 2) throw InvalidArgument("grids need at least 2 points");
}

void MoonsGenConfig::validate() const {
  if (!(noise_std >= 0.0)) throw InvalidArgument("noise_std must be non-negative");
  if (num_clients < 1 || points_per_client < 1) throw InvalidArgument("need at least one client and one point");
}

double regression_ground_truth(double x) {
  return 1.5 * std::sin(0.4 * std::numbers::pi * x) + 1.5 * std::cos(2.0 * std::numbers::pi * x);
}

RegressionData gen_interval_regression(const RegressionGenConfig& cfg) {
  cfg.validate();
  RegressionData data;
  const std::size_t k = cfg.intervals.size();
  for (int m = 0; m < cfg.num_clients; ++m) {
    Rng rng = derive_rng(cfg.seed, static_cast<std::uint64_t>(m), 0x7265);
    std::vector<double> props(k);
    for (std::size_t j = 0; j < k; ++j) {
      std::gamma_distribution<double> gamma(cfg.dirichlet_alpha[j], 1.0);
      props[j] = gamma(rng);
    }
    const double total = std::accumulate(props.begin(), props.end(), 0.0);
    for (double& p : props) p /= total;

    std::discrete_distribution<std::size_t> pick(props.begin(), props.end());
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 1.0);
    DatasetShard shard;
    shard.client_id = m;
    shard.inputs.resize(cfg.points_per_client, 1);
    shard.targets.resize(cfg.points_per_client, 1);
    for (int i = 0; i < cfg.points_per_client; ++i) {
      const Interval& iv = cfg.intervals[pick(rng)];
      const double x = iv.lo + (iv.hi - iv.lo) * unit(rng);
      shard.inputs(i, 0) = x;
      shard.targets(i, 0) = regression_ground_truth(x) + cfg.noise_std * noise(rng);
    }
    data.shards.push_back(std::move(shard));
    data.proportions.push_back(std::move(props));
  }

  const int per = cfg.grid_points_per_interval;
  data.test_inputs.resize(static_cast<Index>(per) * k, 1);
  for (std::size_t j = 0; j < k; ++j) {
    const Interval& iv = cfg.intervals[j];
    for (int i = 0; i < per; ++i) {
      data.test_inputs(static_cast<Index>(j) * per + i, 0) = iv.lo + (iv.hi - iv.lo) * i / (per - 1);
    }
  }
  data.test_targets = data.test_inputs.unaryExpr([](double x) { return regression_ground_truth(x); });

  double lo = cfg.intervals.front().lo;
  double hi = cfg.intervals.front().hi;
  for (const Interval& iv : cfg.intervals) {
    lo = std::min(lo, iv.lo);
    hi = std::max(hi, iv.hi);
  }
  data.span_inputs.resize(cfg.span_grid_points, 1);
  for (int i = 0; i < cfg.span_grid_points; ++i) {
    data.span_inputs(i, 0) = lo + (hi - lo) * i / (cfg.span_grid_points - 1);
  }
  data.span_targets = data.span_inputs.unaryExpr([](double x) { return regression_ground_truth(x); });
  return data;
}

LabeledPoints sample_moons(int n, double noise_std, Rng& rng) {
  std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
  std::normal_distribution<double> noise(0.0, 1.0);
  LabeledPoints out;
  out.inputs.resize(n, 2);
  out.targets = Matrix::Zero(n, 2);
  // First ceil(n/2) points belong to class 0; class counts differ by at most one.
  const int n0 = (n + 1) / 2;
  for (int i = 0; i < n; ++i) {
    const double t = angle(rng);
    const int label = i < n0 ? 0 : 1;
    double x = label == 0 ? std::cos(t) : 1.0 - std::cos(t);
    double y = label == 0 ? std::sin(t) : 0.5 - std::sin(t);
    x += noise_std * noise(rng);
    y += noise_std * noise(rng);
    out.inputs(i, 0) = x;
    out.inputs(i, 1) = y;
    out.targets(i, label) = 1.0;
  }
  return out;
}

std::vector<DatasetShard> gen_moons(const MoonsGenConfig& cfg) {
  cfg.validate();
  std::vector<DatasetShard> shards;
  for (int m = 0; m < cfg.num_clients; ++m) {
    Rng rng = derive_rng(cfg.seed, static_cast<std::uint64_t>(m), 0x6d6f);
    LabeledPoints pts = sample_moons(cfg.points_per_client, cfg.noise_std, rng);
    shards.push_back(DatasetShard{m, std::move(pts.inputs), std::move(pts.targets), {}});
  }
  return shards;
}

DatasetShard split_train_test(const DatasetShard& shard, double fraction, std::uint64_t seed) {
  shard.validate();
  if (!(fraction > 0.0 && fraction < 1.0)) throw InvalidArgument("split fraction must be in (0, 1)");
  const Index n = shard.size();
  const Index n_test = static_cast<Index>(std::llround(fraction * static_cast<double>(n)));
  if (n_test >= n) throw InvalidArgument("split leaves an empty training set");
  std::vector<Index> order(n);
  std::iota(order.begin(), order.end(), Index{0});
  Rng rng = derive_rng(seed, static_cast<std::uint64_t>(shard.client_id), 0x7370);
  std::shuffle(order.begin(), order.end(), rng);
  DatasetShard out = shard;
  out.is_test.assign(n, false);
  for (Index i = 0; i < n_test; ++i) out.is_test[order[i]] = true;
  return out;
}

}  // namespace bpcfl
