#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "bpcfl/nn.hpp"
#include "bpcfl/shard.hpp"

namespace testing {

using namespace bpcfl;

// Small random generators for property tests.
struct Gen {
  Rng rng;
  explicit Gen(std::uint64_t seed) : rng(seed) {}

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }
  Matrix matrix(Index r, Index c, double scale = 1.0) { return standard_normal(r, c, rng) * scale; }

  Matrix one_hot(Index n, Index c) {
    Matrix y = Matrix::Zero(n, c);
    for (Index i = 0; i < n; ++i) y(i, integer(0, static_cast<int>(c) - 1)) = 1.0;
    return y;
  }

  Matrix soft_labels(Index n, Index c) {
    Matrix y(n, c);
    for (Index i = 0; i < n; ++i) {
      for (Index j = 0; j < c; ++j) y(i, j) = uniform(0.05, 1.0);
      y.row(i) /= y.row(i).sum();
    }
    return y;
  }

  // Random architecture from the swish/regression or relu+groupnorm/classification family.
  MlpArchitecture arch(bool classification) {
    MlpArchitecture a;
    const int depth = integer(1, 3);
    a.layer_widths.push_back(integer(1, 3));
    for (int l = 0; l < depth; ++l) a.layer_widths.push_back(classification ? 2 * integer(1, 4) : integer(1, 6));
    a.layer_widths.push_back(classification ? integer(2, 4) : integer(1, 2));
    if (classification) {
      a.activation = Activation::relu;
      a.group_norm = GroupNormSpec{2, 1e-5};
      a.task = Task::classification;
    } else {
      a.activation = Activation::swish;
      a.task = Task::regression;
    }
    return a;
  }
};

inline double rel_err(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Central difference of f along coordinate-wise perturbations of x.
inline double central_diff(const std::function<double(const Vector&)>& f, Vector x, Index i, double h) {
  const double x0 = x[i];
  x[i] = x0 + h;
  const double up = f(x);
  x[i] = x0 - h;
  const double down = f(x);
  return (up - down) / (2.0 * h);
}

inline Vector flatten(const Matrix& m) { return Eigen::Map<const Vector>(m.data(), m.size()); }

inline Matrix unflatten(const Vector& v, Index rows, Index cols) {
  return Eigen::Map<const Matrix>(v.data(), rows, cols);
}

}  // namespace testing
