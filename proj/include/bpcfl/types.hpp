#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace bpcfl {

using Index = Eigen::Index;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using MatrixRef = Eigen::Ref<const Matrix>;

// Flat parameter vector of an MLP. Layout is given by param_layout(arch).
using ParamVector = Eigen::VectorXd;

using Rng = std::mt19937_64;

// Raised when a computation produces NaN/Inf. Never silently clipped.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised for malformed configs, shapes or files.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Independent stream for (master seed, stream id, purpose tag).
inline Rng derive_rng(std::uint64_t master_seed, std::uint64_t stream, std::uint64_t tag = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(master_seed), static_cast<std::uint32_t>(master_seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                    static_cast<std::uint32_t>(tag), static_cast<std::uint32_t>(tag >> 32)};
  return Rng(seq);
}

inline Matrix standard_normal(Index rows, Index cols, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

inline Vector standard_normal(Index n, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector v(n);
  for (Index i = 0; i < n; ++i) v[i] = normal(rng);
  return v;
}

// Cheap vectorized finiteness test: NaN/Inf entries propagate into the sum.
// A finite vector whose sum overflows is reported as non-finite too.
template <typename Derived>
bool finite_sum(const Eigen::DenseBase<Derived>& x) {
  return std::isfinite(x.sum());
}

}  // namespace bpcfl
