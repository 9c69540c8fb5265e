#pragma once

#include <optional>
#include <string>
#include <vector>

#include "bpcfl/types.hpp"

namespace bpcfl {

enum class Activation { swish, relu };
enum class Task { regression, classification };

struct GroupNormSpec {
  int num_groups = 2;
  double epsilon = 1e-5;
};

// Fully connected network. Hidden layers apply `activation`; the output layer
// is linear. When group_norm is set, the first two linear layers (never the
// output layer) are followed by GroupNorm with a learnable per-channel affine.
struct MlpArchitecture {
  std::vector<int> layer_widths;
  Activation activation = Activation::swish;
  std::optional<GroupNormSpec> group_norm;
  Task task = Task::regression;

  static constexpr int kNormalizedLayers = 2;

  int num_layers() const { return static_cast<int>(layer_widths.size()) - 1; }
  int input_dim() const { return layer_widths.front(); }
  int output_dim() const { return layer_widths.back(); }
  bool is_normalized(int layer) const {
    return group_norm.has_value() && layer < kNormalizedLayers && layer < num_layers() - 1;
  }

  void validate() const;

  // [D,128,128,128,C], swish, no normalization.
  static MlpArchitecture regression_mlp(int input_dim = 1, int output_dim = 1);
  // [D,50,50,50,C], relu, GroupNorm with two groups on layers 1-2.
  static MlpArchitecture classification_mlp(int input_dim = 2, int num_classes = 2);
};

struct LayerLayout {
  int in = 0;
  int out = 0;
  Index weight = 0;  // in x out, row-major
  Index bias = 0;
  Index gn_scale = -1;
  Index gn_shift = -1;
};

struct ParamLayout {
  std::vector<LayerLayout> layers;
  Index size = 0;
};

struct LikelihoodSpec {
  enum class Kind { gaussian, categorical_softmax };
  Kind kind = Kind::gaussian;
  double sigma = 0.3;

  static LikelihoodSpec gaussian(double sigma) { return {Kind::gaussian, sigma}; }
  static LikelihoodSpec categorical() { return {Kind::categorical_softmax, 1.0}; }
  void validate() const;
};

ParamLayout param_layout(const MlpArchitecture& arch);
Index param_count(const MlpArchitecture& arch);

// He-normal weights, zero biases, unit GroupNorm scale, zero shift.
ParamVector init_params(const MlpArchitecture& arch, std::uint64_t seed);

void check_params(const MlpArchitecture& arch, const ParamVector& params);

Matrix forward(const MlpArchitecture& arch, const ParamVector& params, const MatrixRef& inputs);

double log_likelihood(const MlpArchitecture& arch, const ParamVector& params, const MatrixRef& inputs,
                      const MatrixRef& targets, const LikelihoodSpec& lik);

ParamVector grad_params(const MlpArchitecture& arch, const ParamVector& params, const MatrixRef& inputs,
                        const MatrixRef& targets, const LikelihoodSpec& lik);

struct DataGradient {
  Matrix inputs;   // K x D
  Matrix targets;  // K x C
};

DataGradient grad_data(const MlpArchitecture& arch, const ParamVector& params, const MatrixRef& inputs,
                       const MatrixRef& targets, const LikelihoodSpec& lik);

// Single pass computing the log-likelihood and any requested gradients.
struct LikelihoodEval {
  double value = 0.0;
  ParamVector grad_params;  // empty unless requested
  Matrix grad_inputs;       // empty unless requested
  Matrix grad_targets;      // empty unless requested
};

struct GradRequest {
  bool params = false;
  bool inputs = false;
  bool targets = false;
};

// Skips the probability-row validation of categorical targets; used by
// callers that have already validated their data.
LikelihoodEval evaluate_likelihood(const MlpArchitecture& arch, const ParamVector& params, const MatrixRef& inputs,
                                   const MatrixRef& targets, const LikelihoodSpec& lik, GradRequest request,
                                   bool validate_targets = true);

// Row-wise log-softmax and softmax.
Matrix log_softmax(const MatrixRef& logits);
Matrix softmax(const MatrixRef& logits);

// Per-(sample, group) normalized activations of a GroupNorm layer before the
// affine transform. Exposed for testing the normalization identity.
Matrix group_normalize(const MatrixRef& activations, int num_groups, double epsilon);

std::string to_string(Activation a);
std::string to_string(Task t);
Activation activation_from_string(const std::string& s);
Task task_from_string(const std::string& s);

}  // namespace bpcfl
