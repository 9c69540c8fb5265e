#include "bpcfl/posterior.hpp"

#include <cmath>

namespace bpcfl {

void PriorSpec::validate() const {
  if (!(precision >= 0.0)) throw InvalidArgument("prior precision must be non-negative");
}

void TargetDensity::validate() const {
  arch.validate();
  prior.validate();
  for (const LikelihoodTerm& t : terms) {
    if (!(t.weight > 0.0)) throw InvalidArgument("likelihood term weight must be positive");
    if (t.inputs.cols() != arch.input_dim() || t.targets.cols() != arch.output_dim() ||
        t.inputs.rows() != t.targets.rows()) {
      throw InvalidArgument("likelihood term is not dimension-compatible with the architecture");
    }
    t.lik.validate();
  }
}

ValueAndGrad log_unnorm_and_grad(const TargetDensity& target, const ParamVector& params) {
  check_params(target.arch, params);
  ValueAndGrad out;
  out.value = -0.5 * target.prior.precision * params.squaredNorm();
  out.grad = -target.prior.precision * params;
  for (const LikelihoodTerm& t : target.terms) {
    LikelihoodEval e = evaluate_likelihood(target.arch, params, t.inputs, t.targets, t.lik, {.params = true}, false);
    out.value += t.weight * e.value;
    out.grad += t.weight * e.grad_params;
  }
  if (!std::isfinite(out.value)) throw NumericalError("log posterior is non-finite");
  if (!finite_sum(out.grad)) throw NumericalError("log posterior gradient is non-finite");
  return out;
}

double log_unnorm(const TargetDensity& target, const ParamVector& params) {
  check_params(target.arch, params);
  double value = -0.5 * target.prior.precision * params.squaredNorm();
  for (const LikelihoodTerm& t : target.terms) {
    value += t.weight * evaluate_likelihood(target.arch, params, t.inputs, t.targets, t.lik, {}, false).value;
  }
  if (!std::isfinite(value)) throw NumericalError("log posterior is non-finite");
  return value;
}

ParamVector grad_log_unnorm(const TargetDensity& target, const ParamVector& params) {
  return log_unnorm_and_grad(target, params).grad;
}

void OptConfig::validate() const {
  if (!(step_size > 0.0)) throw InvalidArgument("optimizer step_size must be positive");
  if (num_steps < 0) throw InvalidArgument("optimizer num_steps must be non-negative");
  if (const auto* sgd = std::get_if<SgdSpec>(&optimizer)) {
    if (!(sgd->momentum >= 0.0 && sgd->momentum < 1.0)) throw InvalidArgument("SGD momentum must be in [0,1)");
  } else {
    const auto& adam = std::get<AdamSpec>(optimizer);
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0 && adam.epsilon > 0.0)) {
      throw InvalidArgument("invalid Adam hyperparameters");
    }
  }
}

AscentOptimizer::AscentOptimizer(const OptConfig& cfg, Index dim) : cfg_(cfg) {
  m_ = Vector::Zero(dim);
  if (cfg_.is_adam()) v_ = Vector::Zero(dim);
}

void AscentOptimizer::reset() {
  m_.setZero();
  if (v_.size() > 0) v_.setZero();
  t_ = 0;
}

void AscentOptimizer::step(ParamVector& x, const ParamVector& grad) {
  ++t_;
  if (const auto* sgd = std::get_if<SgdSpec>(&cfg_.optimizer)) {
    if (sgd->momentum == 0.0) {
      x.noalias() += cfg_.step_size * grad;
      return;
    }
    m_ = sgd->momentum * m_ + grad;
    x.noalias() += cfg_.step_size * m_;
    return;
  }
  const auto& adam = std::get<AdamSpec>(cfg_.optimizer);
  m_ = adam.beta1 * m_ + (1.0 - adam.beta1) * grad;
  v_ = adam.beta2 * v_ + (1.0 - adam.beta2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(adam.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(adam.beta2, static_cast<double>(t_));
  const double lr = cfg_.step_size / c1;
  const double inv_c2 = 1.0 / c2;
  x.array() += lr * m_.array() / ((v_.array() * inv_c2).sqrt() + adam.epsilon);
}

ParamVector map_optimize(const TargetDensity& target, const ParamVector& init, const OptConfig& cfg) {
  cfg.validate();
  check_params(target.arch, init);
  ParamVector theta = init;
  AscentOptimizer opt(cfg, theta.size());
  for (int step = 0; step < cfg.num_steps; ++step) {
    ValueAndGrad vg;
    try {
      vg = log_unnorm_and_grad(target, theta);
    } catch (const NumericalError& e) {
      throw NumericalError("map_optimize diverged at step " + std::to_string(step) + ": " + e.what());
    }
    opt.step(theta, vg.grad);
    if (!finite_sum(theta)) throw NumericalError("map_optimize diverged at step " + std::to_string(step));
  }
  return theta;
}

void HmcConfig::validate() const {
  if (!(step_size > 0.0)) throw InvalidArgument("HMC step_size must be positive");
  if (num_integration_steps <= 0) throw InvalidArgument("HMC num_integration_steps must be positive");
  if (!(inverse_mass_diag > 0.0)) throw InvalidArgument("HMC inverse_mass_diag must be positive");
  if (num_steps <= 0) throw InvalidArgument("HMC num_steps must be positive");
  if (num_samples_kept <= 0 || num_samples_kept > num_steps) {
    throw InvalidArgument("HMC num_samples_kept must be in [1, num_steps]");
  }
}

double hamiltonian(const TargetDensity& target, const ParamVector& position, const Vector& momentum,
                   double inverse_mass) {
  return -log_unnorm(target, position) + 0.5 * inverse_mass * momentum.squaredNorm();
}

void leapfrog(const TargetDensity& target, ParamVector& position, Vector& momentum, double step_size,
              int num_integration_steps, double inverse_mass) {
  // grad of the potential U = -log_unnorm is -grad_log_unnorm
  ParamVector grad = grad_log_unnorm(target, position);
  momentum.noalias() += 0.5 * step_size * grad;
  for (int i = 0; i < num_integration_steps; ++i) {
    position.noalias() += step_size * inverse_mass * momentum;
    grad = grad_log_unnorm(target, position);
    const double scale = (i + 1 == num_integration_steps) ? 0.5 * step_size : step_size;
    momentum.noalias() += scale * grad;
  }
}

std::vector<int> kept_indices(int num_steps, int num_samples_kept) {
  const int window = std::max(num_steps - num_steps / 2, num_samples_kept);
  const int start = num_steps - window;
  std::vector<int> idx;
  idx.reserve(num_samples_kept);
  for (int i = 0; i < num_samples_kept; ++i) {
    idx.push_back(start + static_cast<int>((static_cast<long>(i) * window) / num_samples_kept));
  }
  return idx;
}

HmcResult hmc_sample(const TargetDensity& target, const ParamVector& init, const HmcConfig& cfg) {
  cfg.validate();
  check_params(target.arch, init);
  Rng rng(cfg.seed);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  const double momentum_std = 1.0 / std::sqrt(cfg.inverse_mass_diag);

  const std::vector<int> keep = kept_indices(cfg.num_steps, cfg.num_samples_kept);
  HmcResult result;
  result.samples.reserve(keep.size());
  result.energy_errors.reserve(cfg.num_steps);

  ParamVector current = init;
  double current_u = -log_unnorm(target, current);
  int accepted = 0;
  std::size_t next_keep = 0;
  for (int step = 0; step < cfg.num_steps; ++step) {
    Vector momentum = momentum_std * standard_normal(current.size(), rng);
    const double h0 = current_u + 0.5 * cfg.inverse_mass_diag * momentum.squaredNorm();
    ParamVector proposal = current;
    double proposal_u = 0.0;
    bool finite = true;
    try {
      leapfrog(target, proposal, momentum, cfg.step_size, cfg.num_integration_steps, cfg.inverse_mass_diag);
      proposal_u = -log_unnorm(target, proposal);
    } catch (const NumericalError&) {
      finite = false;
    }
    const double h1 = finite ? proposal_u + 0.5 * cfg.inverse_mass_diag * momentum.squaredNorm()
                             : std::numeric_limits<double>::infinity();
    const double delta_h = h1 - h0;
    result.energy_errors.push_back(delta_h);
    // Draw the uniform unconditionally so the stream does not depend on outcomes.
    const double u = uniform(rng);
    if (finite && std::isfinite(delta_h) && std::log(u) < -delta_h) {
      current = std::move(proposal);
      current_u = proposal_u;
      ++accepted;
    }
    while (next_keep < keep.size() && keep[next_keep] == step) {
      result.samples.push_back(current);
      ++next_keep;
    }
  }
  result.acceptance_rate = static_cast<double>(accepted) / cfg.num_steps;
  return result;
}

PredictiveSummary predictive_mc(const MlpArchitecture& arch, const std::vector<ParamVector>& samples,
                                const MatrixRef& inputs, const LikelihoodSpec& lik) {
  if (samples.empty()) throw InvalidArgument("predictive_mc needs at least one sample");
  PredictiveSummary out;
  const double n = static_cast<double>(samples.size());
  if (lik.kind == LikelihoodSpec::Kind::categorical_softmax) {
    out.task = Task::classification;
    out.probabilities = Matrix::Zero(inputs.rows(), arch.output_dim());
    for (const ParamVector& s : samples) out.probabilities += softmax(forward(arch, s, inputs));
    out.probabilities /= n;
    return out;
  }
  out.task = Task::regression;
  Matrix sum = Matrix::Zero(inputs.rows(), arch.output_dim());
  Matrix sum_sq = sum;
  std::vector<Matrix> outputs;
  outputs.reserve(samples.size());
  for (const ParamVector& s : samples) outputs.push_back(forward(arch, s, inputs));
  for (const Matrix& f : outputs) sum += f;
  out.mean = sum / n;
  // two-pass variance
  for (const Matrix& f : outputs) sum_sq.array() += (f - out.mean).array().square();
  const Matrix var = sum_sq / n;
  out.stddev = (var.array() + lik.sigma * lik.sigma).sqrt();
  return out;
}

}  // namespace bpcfl
