#include "bpcfl/bpc.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace bpcfl {

namespace {

constexpr std::uint64_t kTagInit = 0x696e6974;
constexpr std::uint64_t kTagUpdate = 0x75706474;
constexpr std::uint64_t kTagPretrain = 0x70726574;

}  // namespace

void Pseudocoreset::validate() const {
  if (z.rows() < 1) throw InvalidArgument("coreset must contain at least one point");
  if (y_hat.rows() != z.rows()) throw InvalidArgument("coreset inputs/labels row mismatch");
  if (!z.allFinite() || !y_hat.allFinite()) throw NumericalError("coreset has non-finite entries");
}

void TrajectoryBank::validate(const MlpArchitecture& arch) const {
  if (trajectories.empty()) throw InvalidArgument("trajectory bank is empty");
  if (save_interval <= 0) throw InvalidArgument("bank save_interval must be positive");
  const Index p = param_count(arch);
  for (const auto& traj : trajectories) {
    if (static_cast<int>(traj.size()) != num_checkpoints()) {
      throw InvalidArgument("trajectory has " + std::to_string(traj.size()) + " checkpoints, expected " +
                            std::to_string(num_checkpoints()));
    }
    for (const ParamVector& c : traj) {
      if (c.size() != p) throw InvalidArgument("bank checkpoint does not match architecture");
    }
  }
}

std::vector<std::uint64_t> PretrainConfig::seeds() const {
  std::vector<std::uint64_t> out(num_trajectories);
  for (int i = 0; i < num_trajectories; ++i) out[i] = seed_base + static_cast<std::uint64_t>(i);
  return out;
}

void BpcFklConfig::validate() const {
  if (coreset_size < 1) throw InvalidArgument("coreset_size must be >= 1");
  if (!(sigma_z >= 0.0)) throw InvalidArgument("sigma_z must be non-negative");
  if (!(step_size_x >= 0.0) || !(step_size_y >= 0.0)) throw InvalidArgument("coreset step sizes must be >= 0");
  if (num_updates < 0) throw InvalidArgument("num_updates must be non-negative");
  if (coreset_chain_length <= 0 || data_chain_length <= 0) throw InvalidArgument("chain lengths must be positive");
  if (num_noise_samples < 1) throw InvalidArgument("num_noise_samples must be >= 1");
  if (!(sigma_eps >= 0.0)) throw InvalidArgument("sigma_eps must be non-negative");
  if (!(sampler_step_size >= 0.0)) throw InvalidArgument("sampler step size must be non-negative");
  if (batch_trajectories < 1) throw InvalidArgument("batch_trajectories must be >= 1");
  if (pretrain.num_trajectories < 1) throw InvalidArgument("need at least one pretraining trajectory");
  if (pretrain.save_interval <= 0) throw InvalidArgument("save_interval must be positive");
  if (pretrain.num_steps < 0) throw InvalidArgument("pretrain num_steps must be non-negative");
  if (pretrain.num_steps % pretrain.save_interval != 0) {
    throw InvalidArgument("pretrain num_steps must be a multiple of save_interval");
  }
  if (!(pretrain.step_size > 0.0)) throw InvalidArgument("pretrain step size must be positive");
  if (pretrain.batch_size < 0) throw InvalidArgument("pretrain batch_size must be >= 0");
  if (data_chain_length % pretrain.save_interval != 0) {
    throw InvalidArgument("data_chain_length must be divisible by save_interval");
  }
}

OptConfig BpcFklConfig::sampler_config(double step_size, int steps) const {
  OptConfig opt;
  opt.optimizer = sampler;
  opt.step_size = step_size;
  opt.num_steps = steps;
  return opt;
}

BpcFklConfig BpcFklConfig::regression_preset() {
  BpcFklConfig cfg;
  cfg.coreset_size = 6;
  cfg.sigma_z = 1.0;
  cfg.step_size_x = 1e-2;
  cfg.step_size_y = 1.0;
  cfg.num_updates = 400;
  cfg.coreset_chain_length = 200;
  cfg.data_chain_length = 150;
  cfg.num_noise_samples = 10;
  cfg.sigma_eps = 1e-2;
  cfg.sampler = AdamSpec{};
  cfg.sampler_step_size = 1e-2;
  cfg.pretrain = {100, 300, 5, 1e-2, 0, 1000};
  cfg.batch_trajectories = 10;
  return cfg;
}

BpcFklConfig BpcFklConfig::moons_preset() {
  BpcFklConfig cfg;
  cfg.coreset_size = 5;
  cfg.sigma_z = 0.6;
  cfg.step_size_x = 1e-3;
  cfg.step_size_y = 0.0;
  cfg.num_updates = 700;
  cfg.coreset_chain_length = 200;
  cfg.data_chain_length = 150;
  cfg.num_noise_samples = 10;
  cfg.sigma_eps = 1e-2;
  cfg.sampler = AdamSpec{};
  cfg.sampler_step_size = 1e-2;
  cfg.pretrain = {100, 400, 5, 1e-2, 0, 1000};
  cfg.batch_trajectories = 20;
  return cfg;
}

TrajectoryBank pretrain_bank(const DatasetShard& shard, const MlpArchitecture& arch, const PriorSpec& prior,
                             const LikelihoodSpec& lik, const BpcFklConfig& cfg, std::uint64_t seed,
                             const DivergenceReporter& report) {
  shard.validate();
  cfg.validate();
  const Matrix x = shard.train_inputs();
  const Matrix y = shard.train_targets();
  if (x.rows() < 1) throw InvalidArgument("shard has no training data");
  const PretrainConfig& pc = cfg.pretrain;
  const Index n = x.rows();
  const bool minibatch = pc.batch_size > 0 && pc.batch_size < n;

  TrajectoryBank bank;
  bank.save_interval = pc.save_interval;
  bank.total_steps = pc.num_steps;
  const std::vector<std::uint64_t> seeds = pc.seeds();
  const OptConfig opt_cfg = cfg.sampler_config(pc.step_size, pc.num_steps);

  for (int t = 0; t < pc.num_trajectories; ++t) {
    Rng batch_rng = derive_rng(seed, static_cast<std::uint64_t>(shard.client_id) * 100003u + t, kTagPretrain);
    std::vector<Index> order(n);
    for (Index i = 0; i < n; ++i) order[i] = i;
    ParamVector theta = init_params(arch, seeds[t]);
    AscentOptimizer opt(opt_cfg, theta.size());
    std::vector<ParamVector> checkpoints;
    checkpoints.reserve(bank.num_checkpoints());
    checkpoints.push_back(theta);
    bool diverged = false;
    std::string reason;
    for (int step = 1; step <= pc.num_steps; ++step) {
      try {
        ParamVector grad = -prior.precision * theta;
        if (minibatch) {
          std::shuffle(order.begin(), order.end(), batch_rng);
          Matrix xb(pc.batch_size, x.cols());
          Matrix yb(pc.batch_size, y.cols());
          for (int i = 0; i < pc.batch_size; ++i) {
            xb.row(i) = x.row(order[i]);
            yb.row(i) = y.row(order[i]);
          }
          const double scale = static_cast<double>(n) / pc.batch_size;
          grad += scale * evaluate_likelihood(arch, theta, xb, yb, lik, {.params = true}, false).grad_params;
        } else {
          grad += evaluate_likelihood(arch, theta, x, y, lik, {.params = true}, false).grad_params;
        }
        opt.step(theta, grad);
        if (!finite_sum(theta)) throw NumericalError("non-finite parameters");
      } catch (const NumericalError& e) {
        diverged = true;
        reason = "step " + std::to_string(step) + ": " + e.what();
        break;
      }
      if (step % pc.save_interval == 0) checkpoints.push_back(theta);
    }
    if (diverged) {
      if (report) report(t, reason);
      continue;
    }
    bank.trajectories.push_back(std::move(checkpoints));
    bank.seeds.push_back(seeds[t]);
  }
  if (bank.trajectories.empty()) {
    throw NumericalError("all pretraining trajectories of client " + std::to_string(shard.client_id) + " diverged");
  }
  return bank;
}

Pseudocoreset init_coreset(const DatasetShard& shard, int coreset_size, double sigma_z, Task task,
                           LabelMode label_mode, std::uint64_t seed) {
  shard.validate();
  if (coreset_size < 1) throw InvalidArgument("coreset_size must be >= 1");
  const Matrix x = shard.train_inputs();
  const Matrix y = shard.train_targets();
  if (x.rows() < 1) throw InvalidArgument("shard has no training data");

  Rng rng = derive_rng(seed, static_cast<std::uint64_t>(shard.client_id), kTagInit);
  Pseudocoreset cs;
  cs.owner = shard.client_id;
  cs.label_mode = label_mode;
  const Eigen::RowVectorXd mean = x.colwise().mean();
  cs.z = standard_normal(coreset_size, x.cols(), rng) * sigma_z;
  cs.z.rowwise() += mean;

  if (task == Task::classification) {
    std::map<Index, Index> counts;
    for (Index i = 0; i < y.rows(); ++i) {
      Index label = 0;
      y.row(i).maxCoeff(&label);
      ++counts[label];
    }
    std::vector<std::pair<Index, Index>> order(counts.begin(), counts.end());
    // descending count; ties by ascending class index
    std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    cs.y_hat = Matrix::Zero(coreset_size, y.cols());
    for (int k = 0; k < coreset_size; ++k) cs.y_hat(k, order[k % order.size()].first) = 1.0;
  } else {
    const Eigen::RowVectorXd ymean = y.colwise().mean();
    cs.y_hat = ymean.replicate(coreset_size, 1);
  }
  return cs;
}

DataGradient contrastive_gradient(const MlpArchitecture& arch, const LikelihoodSpec& lik, const Pseudocoreset& coreset,
                                  const ParamVector& theta_data, const ParamVector& theta_coreset,
                                  const std::vector<Vector>& noise_data, const std::vector<Vector>& noise_coreset) {
  if (noise_data.empty() || noise_data.size() != noise_coreset.size()) {
    throw InvalidArgument("contrastive_gradient needs matching, non-empty noise sets");
  }
  const GradRequest req{.params = false, .inputs = true, .targets = true};
  DataGradient g{Matrix::Zero(coreset.z.rows(), coreset.z.cols()),
                 Matrix::Zero(coreset.y_hat.rows(), coreset.y_hat.cols())};
  for (std::size_t s = 0; s < noise_data.size(); ++s) {
    LikelihoodEval d = evaluate_likelihood(arch, theta_data + noise_data[s], coreset.z, coreset.y_hat, lik, req, false);
    LikelihoodEval c =
        evaluate_likelihood(arch, theta_coreset + noise_coreset[s], coreset.z, coreset.y_hat, lik, req, false);
    g.inputs += d.grad_inputs - c.grad_inputs;
    g.targets += d.grad_targets - c.grad_targets;
  }
  const double inv = 1.0 / static_cast<double>(noise_data.size());
  g.inputs *= inv;
  g.targets *= inv;
  return g;
}

Pseudocoreset fkl_update(const Pseudocoreset& coreset, const TrajectoryBank& bank, const MlpArchitecture& arch,
                         const LikelihoodSpec& lik, const BpcFklConfig& cfg, Rng& rng, DataGradient* gradient_out) {
  const int offset = cfg.data_chain_length / bank.save_interval;
  if (cfg.data_chain_length % bank.save_interval != 0) {
    throw InvalidArgument("data_chain_length is not a multiple of the bank save_interval");
  }
  const int last_start = bank.num_checkpoints() - 1 - offset;
  if (last_start < 0) {
    throw InvalidArgument("trajectory bank too short: data chain needs " + std::to_string(offset) +
                          " checkpoints beyond the start");
  }
  const Index p = param_count(arch);
  std::uniform_int_distribution<std::size_t> pick_traj(0, bank.trajectories.size() - 1);
  std::uniform_int_distribution<int> pick_start(0, last_start);

  DataGradient total{Matrix::Zero(coreset.z.rows(), coreset.z.cols()),
                     Matrix::Zero(coreset.y_hat.rows(), coreset.y_hat.cols())};
  std::vector<Vector> noise_data(cfg.num_noise_samples);
  std::vector<Vector> noise_coreset(cfg.num_noise_samples);
  for (int b = 0; b < cfg.batch_trajectories; ++b) {
    const auto& traj = bank.trajectories[pick_traj(rng)];
    const int start = pick_start(rng);
    ParamVector theta_c = traj[start];
    if (cfg.sampler_step_size > 0.0) {
      AscentOptimizer opt(cfg.sampler_config(cfg.sampler_step_size, cfg.coreset_chain_length), p);
      for (int t = 0; t < cfg.coreset_chain_length; ++t) {
        LikelihoodEval e =
            evaluate_likelihood(arch, theta_c, coreset.z, coreset.y_hat, lik, {.params = true}, false);
        opt.step(theta_c, e.grad_params);
      }
      if (!finite_sum(theta_c)) throw NumericalError("coreset sampler diverged");
    }
    const ParamVector& theta_d = traj[start + offset];
    for (int s = 0; s < cfg.num_noise_samples; ++s) {
      noise_data[s] = cfg.sigma_eps * standard_normal(p, rng);
      noise_coreset[s] = cfg.sigma_eps * standard_normal(p, rng);
    }
    DataGradient g = contrastive_gradient(arch, lik, coreset, theta_d, theta_c, noise_data, noise_coreset);
    total.inputs += g.inputs;
    total.targets += g.targets;
  }
  total.inputs /= static_cast<double>(cfg.batch_trajectories);
  total.targets /= static_cast<double>(cfg.batch_trajectories);
  if (!total.inputs.allFinite() || !total.targets.allFinite()) {
    throw NumericalError("contrastive gradient is non-finite; coreset update aborted");
  }

  Pseudocoreset next = coreset;
  next.z += cfg.step_size_x * total.inputs;
  if (coreset.label_mode == LabelMode::learnable && cfg.step_size_y > 0.0) {
    if (lik.kind == LikelihoodSpec::Kind::categorical_softmax) {
      // keep soft-label rows on the probability simplex's affine hull
      Vector row_mean = total.targets.rowwise().mean();
      total.targets.colwise() -= row_mean;
    }
    next.y_hat += cfg.step_size_y * total.targets;
  }
  if (gradient_out != nullptr) *gradient_out = std::move(total);
  return next;
}

Pseudocoreset learn_coreset(const DatasetShard& shard, const MlpArchitecture& arch, const PriorSpec& prior,
                            const LikelihoodSpec& lik, const BpcFklConfig& cfg, std::uint64_t master_seed,
                            const TrajectoryBank* bank) {
  cfg.validate();
  TrajectoryBank local;
  if (bank == nullptr) {
    local = pretrain_bank(shard, arch, prior, lik, cfg, master_seed);
    bank = &local;
  }
  bank->validate(arch);
  const LabelMode mode = cfg.step_size_y > 0.0 ? LabelMode::learnable : LabelMode::frozen;
  Pseudocoreset cs = init_coreset(shard, cfg.coreset_size, cfg.sigma_z, arch.task, mode, master_seed);
  Rng rng = derive_rng(master_seed, static_cast<std::uint64_t>(shard.client_id), kTagUpdate);
  for (int k = 0; k < cfg.num_updates; ++k) {
    try {
      cs = fkl_update(cs, *bank, arch, lik, cfg, rng);
    } catch (const NumericalError& e) {
      throw NumericalError("client " + std::to_string(shard.client_id) + " coreset update " + std::to_string(k) +
                           ": " + e.what());
    }
  }
  return cs;
}

}  // namespace bpcfl
