#pragma once

#include <optional>
#include <vector>

#include "bpcfl/datagen.hpp"
#include "bpcfl/posterior.hpp"

namespace bpcfl {

struct MetricsRecord {
  double nll = 0.0;
  std::optional<double> accuracy;  // classification only
  std::optional<double> rmse;      // regression only
  std::optional<double> ece;       // classification only
  long long floats_cum = 0;
};

constexpr int kDefaultEceBins = 10;

// Index of the largest entry; ties go to the lowest index.
Index argmax_row(const MatrixRef& m, Index row);

// Equal-width bins on the max-probability confidence.
double ece(const MatrixRef& probabilities, const MatrixRef& labels, int num_bins = kDefaultEceBins);

MetricsRecord metrics_bundle(const PredictiveSummary& predictive, const MatrixRef& targets);

// Mean predictive std on grid points outside every interval divided by the
// mean predictive std inside.
double uncertainty_gap_ratio(const MatrixRef& grid_inputs, const MatrixRef& predictive_std,
                             const std::vector<Interval>& support);

}  // namespace bpcfl
