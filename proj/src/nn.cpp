#include "bpcfl/nn.hpp"

#include <cmath>
#include <numbers>

namespace bpcfl {

namespace {

using MatMap = Eigen::Map<const Matrix>;
using MatMapMut = Eigen::Map<Matrix>;

struct LayerCache {
  Matrix input;     // N x in, input to the linear map
  Matrix xhat;      // N x out, normalized (GroupNorm layers only)
  Matrix inv_std;   // N x groups (GroupNorm layers only)
  Matrix preact;    // N x out, value fed to the activation
  Matrix sig;       // N x out, sigmoid(preact) for swish layers
};

struct ForwardPass {
  std::vector<LayerCache> layers;
  Matrix output;
};

ForwardPass run_forward(const MlpArchitecture& arch, const ParamLayout& layout, const ParamVector& params,
                        const MatrixRef& inputs) {
  ForwardPass pass;
  pass.layers.resize(layout.layers.size());
  Matrix h = inputs;
  const int last = static_cast<int>(layout.layers.size()) - 1;
  for (int l = 0; l <= last; ++l) {
    const LayerLayout& ll = layout.layers[l];
    LayerCache& cache = pass.layers[l];
    MatMap w(params.data() + ll.weight, ll.in, ll.out);
    Eigen::Map<const Eigen::RowVectorXd> b(params.data() + ll.bias, ll.out);
    Matrix a(h.rows(), ll.out);
    a.noalias() = h * w;
    a.rowwise() += b;
    cache.input = std::move(h);
    if (l == last) {
      pass.output = std::move(a);
      break;
    }
    if (arch.is_normalized(l)) {
      const int groups = arch.group_norm->num_groups;
      const double eps = arch.group_norm->epsilon;
      const int gsize = ll.out / groups;
      cache.xhat.resize(a.rows(), ll.out);
      cache.inv_std.resize(a.rows(), groups);
      for (Index n = 0; n < a.rows(); ++n) {
        for (int g = 0; g < groups; ++g) {
          auto seg = a.row(n).segment(g * gsize, gsize);
          const double mean = seg.mean();
          const double var = (seg.array() - mean).square().mean();
          const double inv = 1.0 / std::sqrt(var + eps);
          cache.inv_std(n, g) = inv;
          cache.xhat.row(n).segment(g * gsize, gsize) = (seg.array() - mean) * inv;
        }
      }
      Eigen::Map<const Eigen::RowVectorXd> gamma(params.data() + ll.gn_scale, ll.out);
      Eigen::Map<const Eigen::RowVectorXd> beta(params.data() + ll.gn_shift, ll.out);
      a = cache.xhat.array().rowwise() * gamma.array();
      a.rowwise() += beta;
    }
    cache.preact = a;
    if (arch.activation == Activation::relu) {
      h = a.cwiseMax(0.0);
    } else {
      cache.sig = (1.0 + (-a.array()).exp()).inverse().matrix();
      h = (a.array() * cache.sig.array()).matrix();
    }
  }
  return pass;
}

// Backpropagates d(loss)/d(output) through the cached pass. Every entry of
// *grad is overwritten.
void run_backward(const MlpArchitecture& arch, const ParamLayout& layout, const ParamVector& params,
                  const ForwardPass& pass, Matrix d_out, ParamVector* grad, Matrix* grad_inputs) {
  const int last = static_cast<int>(layout.layers.size()) - 1;
  Matrix delta = std::move(d_out);
  for (int l = last; l >= 0; --l) {
    const LayerLayout& ll = layout.layers[l];
    const LayerCache& cache = pass.layers[l];
    if (l != last) {
      // delta is d/d(activation output); map to d/d(preact).
      if (arch.activation == Activation::relu) {
        delta = (cache.preact.array() > 0.0).select(delta, 0.0);
      } else {
        const auto& s = cache.sig.array();
        delta = (delta.array() * s * (1.0 + cache.preact.array() * (1.0 - s))).matrix();
      }
      if (arch.is_normalized(l)) {
        Eigen::Map<const Eigen::RowVectorXd> gamma(params.data() + ll.gn_scale, ll.out);
        if (grad != nullptr) {
          grad->segment(ll.gn_scale, ll.out) = (delta.array() * cache.xhat.array()).colwise().sum().transpose().matrix();
          grad->segment(ll.gn_shift, ll.out) = delta.colwise().sum().transpose();
        }
        Matrix dxhat = delta.array().rowwise() * gamma.array();
        const int groups = arch.group_norm->num_groups;
        const int gsize = ll.out / groups;
        for (Index n = 0; n < delta.rows(); ++n) {
          for (int g = 0; g < groups; ++g) {
            auto dx = dxhat.row(n).segment(g * gsize, gsize);
            auto xh = cache.xhat.row(n).segment(g * gsize, gsize);
            const double mean_d = dx.mean();
            const double mean_dx = dx.dot(xh) / gsize;
            delta.row(n).segment(g * gsize, gsize) =
                cache.inv_std(n, g) * (dx.array() - mean_d - xh.array() * mean_dx);
          }
        }
      }
    }
    if (grad != nullptr) {
      MatMapMut gw(grad->data() + ll.weight, ll.in, ll.out);
      gw.noalias() = cache.input.transpose() * delta;
      grad->segment(ll.bias, ll.out) = delta.colwise().sum().transpose();
    }
    if (l > 0 || grad_inputs != nullptr) {
      MatMap w(params.data() + ll.weight, ll.in, ll.out);
      Matrix next(delta.rows(), ll.in);
      next.noalias() = delta * w.transpose();
      delta = std::move(next);
    }
  }
  if (grad_inputs != nullptr) *grad_inputs = std::move(delta);
}

void check_shapes(const MlpArchitecture& arch, const ParamVector& params, const MatrixRef& inputs,
                  const MatrixRef* targets) {
  check_params(arch, params);
  if (inputs.cols() != arch.input_dim()) {
    throw InvalidArgument("input has " + std::to_string(inputs.cols()) + " columns, architecture expects " +
                          std::to_string(arch.input_dim()));
  }
  if (targets != nullptr && (targets->rows() != inputs.rows() || targets->cols() != arch.output_dim())) {
    throw InvalidArgument("target shape does not match inputs/architecture");
  }
}

}  // namespace

void MlpArchitecture::validate() const {
  if (layer_widths.size() < 2) throw InvalidArgument("layer_widths needs at least input and output width");
  for (int w : layer_widths) {
    if (w <= 0) throw InvalidArgument("layer widths must be positive");
  }
  if (group_norm) {
    if (group_norm->num_groups <= 0) throw InvalidArgument("num_groups must be positive");
    if (!(group_norm->epsilon > 0.0)) throw InvalidArgument("GroupNorm epsilon must be positive");
    for (int l = 0; l < num_layers(); ++l) {
      if (is_normalized(l) && layer_widths[l + 1] % group_norm->num_groups != 0) {
        throw InvalidArgument("normalized layer width " + std::to_string(layer_widths[l + 1]) +
                              " not divisible by num_groups");
      }
    }
  }
}

MlpArchitecture MlpArchitecture::regression_mlp(int input_dim, int output_dim) {
  return MlpArchitecture{{input_dim, 128, 128, 128, output_dim}, Activation::swish, std::nullopt, Task::regression};
}

MlpArchitecture MlpArchitecture::classification_mlp(int input_dim, int num_classes) {
  return MlpArchitecture{
      {input_dim, 50, 50, 50, num_classes}, Activation::relu, GroupNormSpec{2, 1e-5}, Task::classification};
}

void LikelihoodSpec::validate() const {
  if (kind == Kind::gaussian && !(sigma > 0.0)) throw InvalidArgument("gaussian sigma must be positive");
}

ParamLayout param_layout(const MlpArchitecture& arch) {
  arch.validate();
  ParamLayout layout;
  Index offset = 0;
  for (int l = 0; l < arch.num_layers(); ++l) {
    LayerLayout ll;
    ll.in = arch.layer_widths[l];
    ll.out = arch.layer_widths[l + 1];
    ll.weight = offset;
    offset += static_cast<Index>(ll.in) * ll.out;
    ll.bias = offset;
    offset += ll.out;
    if (arch.is_normalized(l)) {
      ll.gn_scale = offset;
      offset += ll.out;
      ll.gn_shift = offset;
      offset += ll.out;
    }
    layout.layers.push_back(ll);
  }
  layout.size = offset;
  return layout;
}

Index param_count(const MlpArchitecture& arch) {
  arch.validate();
  Index total = 0;
  for (int l = 0; l < arch.num_layers(); ++l) {
    const Index in = arch.layer_widths[l];
    const Index out = arch.layer_widths[l + 1];
    total += in * out + out;
    if (arch.is_normalized(l)) total += 2 * out;
  }
  return total;
}

ParamVector init_params(const MlpArchitecture& arch, std::uint64_t seed) {
  const ParamLayout layout = param_layout(arch);
  ParamVector params = ParamVector::Zero(layout.size);
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (const LayerLayout& ll : layout.layers) {
    const double scale = std::sqrt(2.0 / ll.in);
    for (Index i = 0; i < static_cast<Index>(ll.in) * ll.out; ++i) params[ll.weight + i] = scale * normal(rng);
    if (ll.gn_scale >= 0) params.segment(ll.gn_scale, ll.out).setOnes();
  }
  return params;
}

void check_params(const MlpArchitecture& arch, const ParamVector& params) {
  const Index expected = param_count(arch);
  if (params.size() != expected) {
    throw InvalidArgument("parameter vector has length " + std::to_string(params.size()) + ", expected " +
                          std::to_string(expected));
  }
}

Matrix forward(const MlpArchitecture& arch, const ParamVector& params, const MatrixRef& inputs) {
  check_shapes(arch, params, inputs, nullptr);
  Matrix out = run_forward(arch, param_layout(arch), params, inputs).output;
  if (!out.allFinite()) throw NumericalError("forward produced non-finite output");
  return out;
}

Matrix log_softmax(const MatrixRef& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    const double lse = m + std::log((logits.row(i).array() - m).exp().sum());
    out.row(i) = logits.row(i).array() - lse;
  }
  return out;
}

Matrix softmax(const MatrixRef& logits) { return log_softmax(logits).array().exp(); }

Matrix group_normalize(const MatrixRef& activations, int num_groups, double epsilon) {
  if (num_groups <= 0 || activations.cols() % num_groups != 0) throw InvalidArgument("bad group count");
  const Index gsize = activations.cols() / num_groups;
  Matrix out(activations.rows(), activations.cols());
  for (Index n = 0; n < activations.rows(); ++n) {
    for (int g = 0; g < num_groups; ++g) {
      auto seg = activations.row(n).segment(g * gsize, gsize);
      const double mean = seg.mean();
      const double var = (seg.array() - mean).square().mean();
      out.row(n).segment(g * gsize, gsize) = (seg.array() - mean) / std::sqrt(var + epsilon);
    }
  }
  return out;
}

LikelihoodEval evaluate_likelihood(const MlpArchitecture& arch, const ParamVector& params, const MatrixRef& inputs,
                                   const MatrixRef& targets, const LikelihoodSpec& lik, GradRequest request,
                                   bool validate_targets) {
  check_shapes(arch, params, inputs, &targets);
  lik.validate();
  if (validate_targets && lik.kind == LikelihoodSpec::Kind::categorical_softmax) {
    for (Index i = 0; i < targets.rows(); ++i) {
      if (std::abs(targets.row(i).sum() - 1.0) > 1e-9) {
        throw InvalidArgument("classification target row " + std::to_string(i) + " does not sum to 1");
      }
    }
  }
  const ParamLayout layout = param_layout(arch);
  ForwardPass pass = run_forward(arch, layout, params, inputs);
  const Matrix& f = pass.output;
  if (!finite_sum(f)) throw NumericalError("forward produced non-finite output");

  LikelihoodEval result;
  Matrix d_out;  // d(loglik)/d(f)
  if (lik.kind == LikelihoodSpec::Kind::gaussian) {
    const double var = lik.sigma * lik.sigma;
    const Matrix residual = targets - f;
    result.value = -0.5 * static_cast<double>(f.size()) * std::log(2.0 * std::numbers::pi * var) -
                   residual.squaredNorm() / (2.0 * var);
    if (request.params || request.inputs) d_out = residual / var;
    if (request.targets) result.grad_targets = -residual / var;
  } else {
    const Matrix logp = log_softmax(f);
    result.value = (targets.array() * logp.array()).sum();
    if (request.params || request.inputs) {
      // d/df of sum_c y_c log softmax(f)_c = y - softmax(f) * sum_c y_c
      const Vector mass = targets.rowwise().sum();
      d_out = targets - (logp.array().exp().colwise() * mass.array()).matrix();
    }
    if (request.targets) result.grad_targets = logp;
  }
  if (!std::isfinite(result.value)) throw NumericalError("log-likelihood is non-finite");

  if (request.params || request.inputs) {
    if (request.params) result.grad_params.resize(layout.size);
    run_backward(arch, layout, params, pass, std::move(d_out), request.params ? &result.grad_params : nullptr,
                 request.inputs ? &result.grad_inputs : nullptr);
    if (request.params && !finite_sum(result.grad_params)) throw NumericalError("non-finite parameter gradient");
    if (request.inputs && !finite_sum(result.grad_inputs)) throw NumericalError("non-finite input gradient");
  }
  return result;
}

double log_likelihood(const MlpArchitecture& arch, const ParamVector& params, const MatrixRef& inputs,
                      const MatrixRef& targets, const LikelihoodSpec& lik) {
  return evaluate_likelihood(arch, params, inputs, targets, lik, {}).value;
}

ParamVector grad_params(const MlpArchitecture& arch, const ParamVector& params, const MatrixRef& inputs,
                        const MatrixRef& targets, const LikelihoodSpec& lik) {
  return evaluate_likelihood(arch, params, inputs, targets, lik, {.params = true}).grad_params;
}

DataGradient grad_data(const MlpArchitecture& arch, const ParamVector& params, const MatrixRef& inputs,
                       const MatrixRef& targets, const LikelihoodSpec& lik) {
  LikelihoodEval e = evaluate_likelihood(arch, params, inputs, targets, lik, {.inputs = true, .targets = true});
  return {std::move(e.grad_inputs), std::move(e.grad_targets)};
}

std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "swish"; }
std::string to_string(Task t) { return t == Task::classification ? "classification" : "regression"; }

Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "swish") return Activation::swish;
  throw InvalidArgument("unknown activation '" + s + "'");
}

Task task_from_string(const std::string& s) {
  if (s == "regression") return Task::regression;
  if (s == "classification") return Task::classification;
  throw InvalidArgument("unknown task '" + s + "'");
}

}  // namespace bpcfl
