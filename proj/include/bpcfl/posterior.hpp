#pragma once

#include <variant>
#include <vector>

#include "bpcfl/nn.hpp"

namespace bpcfl {

// Isotropic Gaussian prior N(0, precision^-1 I) over the parameters.
struct PriorSpec {
  double precision = 0.0;
  void validate() const;
};

struct LikelihoodTerm {
  Matrix inputs;
  Matrix targets;
  LikelihoodSpec lik;
  double weight = 1.0;
};

// Unnormalized log posterior: prior plus weighted likelihood terms.
struct TargetDensity {
  MlpArchitecture arch;
  PriorSpec prior;
  std::vector<LikelihoodTerm> terms;

  void validate() const;
};

double log_unnorm(const TargetDensity& target, const ParamVector& params);
ParamVector grad_log_unnorm(const TargetDensity& target, const ParamVector& params);

struct ValueAndGrad {
  double value = 0.0;
  ParamVector grad;
};
ValueAndGrad log_unnorm_and_grad(const TargetDensity& target, const ParamVector& params);

struct SgdSpec {
  double momentum = 0.0;
};

struct AdamSpec {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct OptConfig {
  std::variant<SgdSpec, AdamSpec> optimizer = SgdSpec{};
  double step_size = 1e-2;
  int num_steps = 0;

  void validate() const;
  bool is_adam() const { return std::holds_alternative<AdamSpec>(optimizer); }
};

// Stateful first-order optimizer that ascends an objective given its gradient.
class AscentOptimizer {
 public:
  AscentOptimizer(const OptConfig& cfg, Index dim);

  // x <- x + update(grad)
  void step(ParamVector& x, const ParamVector& grad);
  void reset();

 private:
  OptConfig cfg_;
  Vector m_;
  Vector v_;
  long t_ = 0;
};

// Gradient ascent on log_unnorm. Throws NumericalError on divergence.
ParamVector map_optimize(const TargetDensity& target, const ParamVector& init, const OptConfig& cfg);

struct HmcConfig {
  double step_size = 1e-3;
  int num_integration_steps = 20;
  double inverse_mass_diag = 1.0;
  int num_steps = 200;
  int num_samples_kept = 40;
  std::uint64_t seed = 0;

  void validate() const;
};

struct HmcResult {
  std::vector<ParamVector> samples;
  double acceptance_rate = 0.0;
  std::vector<double> energy_errors;  // H(proposal) - H(current), one per step
};

// Leapfrog integration of (position, momentum) for the potential -log_unnorm
// with kinetic energy p.p * inverse_mass / 2. Updates both in place.
void leapfrog(const TargetDensity& target, ParamVector& position, Vector& momentum, double step_size,
              int num_integration_steps, double inverse_mass);

double hamiltonian(const TargetDensity& target, const ParamVector& position, const Vector& momentum,
                   double inverse_mass);

HmcResult hmc_sample(const TargetDensity& target, const ParamVector& init, const HmcConfig& cfg);

// Indices of the chain states kept after burn-in and thinning.
std::vector<int> kept_indices(int num_steps, int num_samples_kept);

struct PredictiveSummary {
  Task task = Task::regression;
  Matrix probabilities;  // classification: N x C mean softmax
  Matrix mean;           // regression: N x C predictive mean
  Matrix stddev;         // regression: N x C predictive std including observation noise
};

PredictiveSummary predictive_mc(const MlpArchitecture& arch, const std::vector<ParamVector>& samples,
                                const MatrixRef& inputs, const LikelihoodSpec& lik);

}  // namespace bpcfl
