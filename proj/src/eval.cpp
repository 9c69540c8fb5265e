#include "bpcfl/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace bpcfl {

Index argmax_row(const MatrixRef& m, Index row) {
  Index best = 0;
  for (Index c = 1; c < m.cols(); ++c) {
    if (m(row, c) > m(row, best)) best = c;
  }
  return best;
}

double ece(const MatrixRef& probabilities, const MatrixRef& labels, int num_bins) {
  if (num_bins < 1) throw InvalidArgument("ece needs at least one bin");
  if (probabilities.rows() != labels.rows() || probabilities.cols() != labels.cols()) {
    throw InvalidArgument("ece: probabilities and labels shapes differ");
  }
  const Index n = probabilities.rows();
  if (n == 0) return 0.0;
  std::vector<double> conf_sum(num_bins, 0.0);
  std::vector<double> correct(num_bins, 0.0);
  std::vector<Index> count(num_bins, 0);
  for (Index i = 0; i < n; ++i) {
    if (!probabilities.row(i).allFinite() || (probabilities.row(i).array() < 0.0).any() ||
        std::abs(probabilities.row(i).sum() - 1.0) > 1e-6) {
      throw InvalidArgument("ece: row " + std::to_string(i) + " is not a probability vector");
    }
    const Index pred = argmax_row(probabilities, i);
    const double conf = probabilities(i, pred);
    // bins are (b/B, (b+1)/B]; confidence 0 falls into the first bin
    int bin = std::clamp(static_cast<int>(std::ceil(conf * num_bins)) - 1, 0, num_bins - 1);
    while (bin > 0 && conf <= static_cast<double>(bin) / num_bins) --bin;
    while (bin < num_bins - 1 && conf > static_cast<double>(bin + 1) / num_bins) ++bin;
    conf_sum[bin] += conf;
    correct[bin] += (argmax_row(labels, i) == pred) ? 1.0 : 0.0;
    ++count[bin];
  }
  double total = 0.0;
  for (int b = 0; b < num_bins; ++b) {
    if (count[b] == 0) continue;
    const double c = static_cast<double>(count[b]);
    total += (c / static_cast<double>(n)) * std::abs(correct[b] / c - conf_sum[b] / c);
  }
  return total;
}

MetricsRecord metrics_bundle(const PredictiveSummary& predictive, const MatrixRef& targets) {
  MetricsRecord rec;
  if (predictive.task == Task::classification) {
    const Matrix& p = predictive.probabilities;
    if (p.rows() != targets.rows() || p.cols() != targets.cols()) throw InvalidArgument("metrics: shape mismatch");
    const Index n = p.rows();
    double nll = 0.0;
    Index hits = 0;
    for (Index i = 0; i < n; ++i) {
      const Index label = argmax_row(targets, i);
      nll -= std::log(p(i, label));
      hits += (argmax_row(p, i) == label);
    }
    rec.nll = n > 0 ? nll / static_cast<double>(n) : 0.0;
    rec.accuracy = n > 0 ? static_cast<double>(hits) / static_cast<double>(n) : 0.0;
    rec.ece = ece(p, targets);
    return rec;
  }
  const Matrix& mu = predictive.mean;
  const Matrix& sd = predictive.stddev;
  if (mu.rows() != targets.rows() || mu.cols() != targets.cols() || sd.rows() != mu.rows() ||
      sd.cols() != mu.cols()) {
    throw InvalidArgument("metrics: shape mismatch");
  }
  const Index n = mu.rows();
  const Matrix resid = targets - mu;
  double nll = 0.0;
  for (Index i = 0; i < n; ++i) {
    for (Index c = 0; c < mu.cols(); ++c) {
      const double var = sd(i, c) * sd(i, c);
      nll += 0.5 * std::log(2.0 * std::numbers::pi * var) + resid(i, c) * resid(i, c) / (2.0 * var);
    }
  }
  rec.nll = n > 0 ? nll / static_cast<double>(n) : 0.0;
  rec.rmse = n > 0 ? std::sqrt(resid.squaredNorm() / static_cast<double>(resid.size())) : 0.0;
  return rec;
}

double uncertainty_gap_ratio(const MatrixRef& grid_inputs, const MatrixRef& predictive_std,
                             const std::vector<Interval>& support) {
  if (grid_inputs.rows() != predictive_std.rows()) throw InvalidArgument("gap ratio: grid/std length mismatch");
  double inside = 0.0;
  double outside = 0.0;
  Index n_in = 0;
  Index n_out = 0;
  for (Index i = 0; i < grid_inputs.rows(); ++i) {
    const double x = grid_inputs(i, 0);
    bool in = false;
    for (const Interval& iv : support) in = in || (x >= iv.lo && x <= iv.hi);
    const double s = predictive_std.row(i).mean();
    if (in) {
      inside += s;
      ++n_in;
    } else {
      outside += s;
      ++n_out;
    }
  }
  if (n_out == 0) throw InvalidArgument("gap ratio: no grid points outside the support");
  if (n_in == 0) throw InvalidArgument("gap ratio: no grid points inside the support");
  return (outside / static_cast<double>(n_out)) / (inside / static_cast<double>(n_in));
}

}  // namespace bpcfl
