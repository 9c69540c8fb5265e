#include "bpcfl/federation.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <numeric>
#include <thread>

namespace bpcfl {

namespace {

constexpr std::uint64_t kTagSampling = 0x73616d70;

int direction_rank(Direction d) { return d == Direction::down ? 0 : 1; }

}  // namespace

void CommLedger::record(CommEvent event) {
  if (event.float32_count < 0 || event.int_count < 0) throw InvalidArgument("ledger counts must be non-negative");
  total_floats_ += event.float32_count;
  total_ints_ += event.int_count;
  events_.push_back(std::move(event));
}

void CommLedger::append(const CommLedger& other) {
  for (const CommEvent& e : other.events_) record(e);
}

std::vector<CommEvent> CommLedger::normalized() const {
  std::vector<CommEvent> out = events_;
  std::stable_sort(out.begin(), out.end(), [](const CommEvent& a, const CommEvent& b) {
    if (a.round != b.round) return a.round < b.round;
    if (a.client_id != b.client_id) return a.client_id < b.client_id;
    return direction_rank(a.direction) < direction_rank(b.direction);
  });
  return out;
}

long long comm_totals(const CommLedger& ledger, const std::string& method) {
  long long total = 0;
  for (const CommEvent& e : ledger.events()) {
    if (e.method == method) total += e.float32_count;
  }
  return total;
}

long long comm_totals_ints(const CommLedger& ledger, const std::string& method) {
  long long total = 0;
  for (const CommEvent& e : ledger.events()) {
    if (e.method == method) total += e.int_count;
  }
  return total;
}

std::optional<long long> floats_to_reach(const std::vector<TracePoint>& trace, double threshold,
                                         bool higher_is_better) {
  for (const TracePoint& p : trace) {
    const bool reached = higher_is_better ? p.metric >= threshold : p.metric <= threshold;
    if (reached) return p.floats_cum;
  }
  return std::nullopt;
}

ServerCoreset aggregate_coresets(std::vector<Pseudocoreset> coresets, const std::vector<Index>& data_sizes) {
  if (coresets.size() != data_sizes.size()) throw InvalidArgument("one data size per coreset is required");
  ServerCoreset sc;
  sc.num_clients = static_cast<int>(coresets.size());
  for (Index n : data_sizes) {
    if (n <= 0) throw InvalidArgument("client data sizes must be positive");
    sc.total_data_size += n;
  }
  const double m = static_cast<double>(sc.num_clients);
  for (std::size_t i = 0; i < coresets.size(); ++i) {
    coresets[i].validate();
    WeightedCoreset wc;
    wc.weight = m * static_cast<double>(data_sizes[i]) / static_cast<double>(sc.total_data_size);
    wc.num_data = data_sizes[i];
    wc.coreset = std::move(coresets[i]);
    sc.entries.push_back(std::move(wc));
  }
  return sc;
}

CoresetCost coreset_cost(const Pseudocoreset& coreset) {
  CoresetCost c;
  const long long k = coreset.z.rows();
  c.floats = k * coreset.z.cols();
  if (coreset.label_mode == LabelMode::learnable) {
    c.floats += k * coreset.y_hat.cols();
  } else {
    c.ints = k;
  }
  return c;
}

BpcFlResult run_bpc_fl(const std::vector<DatasetShard>& shards, const MlpArchitecture& arch, const PriorSpec& prior,
                       const LikelihoodSpec& lik, const BpcFklConfig& cfg, const BpcFlOptions& options) {
  if (shards.empty()) throw InvalidArgument("run_bpc_fl needs at least one shard");
  cfg.validate();
  const std::size_t m = shards.size();
  std::vector<Pseudocoreset> coresets(m);
  std::vector<TrajectoryBank> banks(options.keep_banks ? m : 0);
  std::vector<std::exception_ptr> errors(m);

  auto run_client = [&](std::size_t i) {
    try {
      TrajectoryBank bank = pretrain_bank(shards[i], arch, prior, lik, cfg, options.master_seed);
      coresets[i] = learn_coreset(shards[i], arch, prior, lik, cfg, options.master_seed, &bank);
      if (options.keep_banks) banks[i] = std::move(bank);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };

  const int threads = std::clamp(options.max_threads, 1, static_cast<int>(m));
  if (threads == 1) {
    for (std::size_t i = 0; i < m; ++i) run_client(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < m; i = next++) run_client(i);
      });
    }
    for (std::thread& th : pool) th.join();
  }

  for (std::size_t i = 0; i < m; ++i) {
    if (!errors[i]) continue;
    const std::string prefix = "client " + std::to_string(shards[i].client_id) + ": ";
    try {
      std::rethrow_exception(errors[i]);
    } catch (const NumericalError& e) {
      throw NumericalError(prefix + e.what());
    } catch (const InvalidArgument& e) {
      throw InvalidArgument(prefix + e.what());
    } catch (const std::exception& e) {
      throw std::runtime_error(prefix + e.what());
    }
  }

  BpcFlResult result;
  std::vector<Index> sizes;
  for (std::size_t i = 0; i < m; ++i) {
    const CoresetCost cost = coreset_cost(coresets[i]);
    result.ledger.record({0, Direction::up, shards[i].client_id, cost.floats, cost.ints, kMethodBpcFl});
    sizes.push_back(shards[i].train_size());
  }
  result.server = aggregate_coresets(std::move(coresets), sizes);
  result.banks = std::move(banks);
  return result;
}

TargetDensity server_target(const ServerCoreset& sc, const MlpArchitecture& arch, const PriorSpec& prior,
                            const LikelihoodSpec& lik) {
  TargetDensity target{arch, prior, {}};
  for (const WeightedCoreset& wc : sc.entries) {
    target.terms.push_back({wc.coreset.z, wc.coreset.y_hat, lik, wc.weight});
  }
  target.validate();
  return target;
}

void FedAvgConfig::validate(int num_clients) const {
  if (rounds < 0) throw InvalidArgument("fedavg rounds must be non-negative");
  if (clients_per_round < 1 || clients_per_round > num_clients) {
    throw InvalidArgument("fedavg clients_per_round must be in [1, number of clients]");
  }
  if (local_steps < 1) throw InvalidArgument("fedavg local_steps must be positive");
  if (!(l2_precision >= 0.0)) throw InvalidArgument("fedavg l2_precision must be non-negative");
  client.validate();
  server.validate();
}

FedAvgResult run_fedavg(const std::vector<DatasetShard>& shards, const MlpArchitecture& arch,
                        const LikelihoodSpec& lik, const FedAvgConfig& cfg, const RoundObserver& observer) {
  if (shards.empty()) throw InvalidArgument("run_fedavg needs at least one shard");
  const int m = static_cast<int>(shards.size());
  cfg.validate(m);
  arch.validate();

  std::vector<TargetDensity> locals;
  std::vector<double> sizes;
  for (const DatasetShard& s : shards) {
    locals.push_back({arch, PriorSpec{cfg.l2_precision}, {{s.train_inputs(), s.train_targets(), lik, 1.0}}});
    locals.back().validate();
    sizes.push_back(static_cast<double>(s.train_size()));
  }

  ParamVector theta = cfg.init ? *cfg.init : init_params(arch, cfg.seed);
  check_params(arch, theta);
  const long long p = theta.size();

  FedAvgResult result;
  for (const CommEvent& e : cfg.init_ledger.events()) {
    CommEvent copy = e;
    copy.round = 0;
    result.ledger.record(std::move(copy));
  }
  result.params.push_back(theta);
  result.floats_cum.push_back(result.ledger.total_floats());
  if (observer) observer(0, theta, result.ledger.total_floats());

  AscentOptimizer server_opt(cfg.server, p);
  std::vector<int> order(m);
  for (int r = 1; r <= cfg.rounds; ++r) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng = derive_rng(cfg.seed, static_cast<std::uint64_t>(r), kTagSampling);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<int> chosen(order.begin(), order.begin() + cfg.clients_per_round);
    std::sort(chosen.begin(), chosen.end());

    Vector delta = Vector::Zero(p);
    double weight_sum = 0.0;
    for (int c : chosen) {
      result.ledger.record({r, Direction::down, shards[c].client_id, p, 0, kMethodFedAvg});
      ParamVector local = theta;
      AscentOptimizer opt(cfg.client, p);
      try {
        for (int s = 0; s < cfg.local_steps; ++s) opt.step(local, grad_log_unnorm(locals[c], local));
      } catch (const NumericalError& e) {
        throw NumericalError("fedavg diverged in round " + std::to_string(r) + " on client " +
                             std::to_string(shards[c].client_id) + ": " + e.what());
      }
      delta += sizes[c] * (local - theta);
      weight_sum += sizes[c];
      result.ledger.record({r, Direction::up, shards[c].client_id, p, 0, kMethodFedAvg});
    }
    delta /= weight_sum;
    server_opt.step(theta, delta);
    if (!finite_sum(theta)) throw NumericalError("fedavg diverged in round " + std::to_string(r));
    result.params.push_back(theta);
    result.floats_cum.push_back(result.ledger.total_floats());
    if (observer) observer(r, theta, result.ledger.total_floats());
  }
  return result;
}

}  // namespace bpcfl
