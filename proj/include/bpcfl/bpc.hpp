#pragma once

#include <functional>
#include <string>
#include <vector>

#include "bpcfl/posterior.hpp"
#include "bpcfl/shard.hpp"

namespace bpcfl {

enum class LabelMode { learnable, frozen };

// Synthetic inputs and pseudo-labels learned by one client.
struct Pseudocoreset {
  Matrix z;      // K x D
  Matrix y_hat;  // K x C
  int owner = 0;
  LabelMode label_mode = LabelMode::learnable;

  Index size() const { return z.rows(); }
  void validate() const;
};

// MAP optimization trajectories on a client's local posterior. Checkpoint j
// of every trajectory holds the parameters after j * save_interval steps.
struct TrajectoryBank {
  std::vector<std::vector<ParamVector>> trajectories;
  std::vector<std::uint64_t> seeds;
  int save_interval = 1;
  int total_steps = 0;

  int num_checkpoints() const { return total_steps / save_interval + 1; }
  void validate(const MlpArchitecture& arch) const;
};

struct PretrainConfig {
  int num_trajectories = 100;
  int num_steps = 300;
  int save_interval = 5;
  double step_size = 1e-2;
  // 0 means full batch; otherwise minibatches rescaled to the full data size
  int batch_size = 0;
  // Trajectory i starts from init_params(arch, seed_base + i) on every client.
  std::uint64_t seed_base = 1000;

  std::vector<std::uint64_t> seeds() const;
};

struct BpcFklConfig {
  int coreset_size = 6;
  double sigma_z = 1.0;
  double step_size_x = 1e-2;
  double step_size_y = 1.0;
  int num_updates = 400;
  int coreset_chain_length = 200;  // sampler steps from the start checkpoint on the coreset
  int data_chain_length = 150;     // optimizer steps between the start checkpoint and theta_D
  int num_noise_samples = 10;
  double sigma_eps = 1e-2;
  std::variant<SgdSpec, AdamSpec> sampler = AdamSpec{};
  double sampler_step_size = 1e-2;
  PretrainConfig pretrain;
  int batch_trajectories = 10;

  void validate() const;
  OptConfig sampler_config(double step_size, int steps) const;

  static BpcFklConfig regression_preset();
  static BpcFklConfig moons_preset();
};

// Called with (trajectory index, reason) when a pretraining run diverges.
using DivergenceReporter = std::function<void(int, const std::string&)>;

TrajectoryBank pretrain_bank(const DatasetShard& shard, const MlpArchitecture& arch, const PriorSpec& prior,
                             const LikelihoodSpec& lik, const BpcFklConfig& cfg, std::uint64_t seed,
                             const DivergenceReporter& report = {});

Pseudocoreset init_coreset(const DatasetShard& shard, int coreset_size, double sigma_z, Task task,
                           LabelMode label_mode, std::uint64_t seed);

// (1/S) sum_s [grad_C log p(y_hat | f(Z, theta_D + eps_D^s)) - grad_C log p(y_hat | f(Z, theta_C + eps_C^s))]
// Noise vectors are already scaled.
DataGradient contrastive_gradient(const MlpArchitecture& arch, const LikelihoodSpec& lik, const Pseudocoreset& coreset,
                                  const ParamVector& theta_data, const ParamVector& theta_coreset,
                                  const std::vector<Vector>& noise_data, const std::vector<Vector>& noise_coreset);

// One coreset update: averaged contrastive gradient over cfg.batch_trajectories
// draws of (trajectory, start checkpoint), followed by an ascent step.
Pseudocoreset fkl_update(const Pseudocoreset& coreset, const TrajectoryBank& bank, const MlpArchitecture& arch,
                         const LikelihoodSpec& lik, const BpcFklConfig& cfg, Rng& rng,
                         DataGradient* gradient_out = nullptr);

Pseudocoreset learn_coreset(const DatasetShard& shard, const MlpArchitecture& arch, const PriorSpec& prior,
                            const LikelihoodSpec& lik, const BpcFklConfig& cfg, std::uint64_t master_seed,
                            const TrajectoryBank* bank = nullptr);

}  // namespace bpcfl
