#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "bpcfl/bpc.hpp"
#include "bpcfl/eval.hpp"

namespace bpcfl {

enum class Direction { up, down };

struct CommEvent {
  int round = 0;
  Direction direction = Direction::up;
  int client_id = 0;
  long long float32_count = 0;
  long long int_count = 0;  // class indices sent in place of one-hot labels
  std::string method;
};

// Append-only record of simulated client/server traffic.
class CommLedger {
 public:
  void record(CommEvent event);
  void append(const CommLedger& other);

  const std::vector<CommEvent>& events() const { return events_; }
  long long total_floats() const { return total_floats_; }
  long long total_ints() const { return total_ints_; }

  // Events sorted by (round, client_id, direction); stable otherwise.
  std::vector<CommEvent> normalized() const;

 private:
  std::vector<CommEvent> events_;
  long long total_floats_ = 0;
  long long total_ints_ = 0;
};

long long comm_totals(const CommLedger& ledger, const std::string& method);
long long comm_totals_ints(const CommLedger& ledger, const std::string& method);

struct TracePoint {
  int round = 0;
  long long floats_cum = 0;
  double metric = 0.0;
};

// Cumulative float count at the first trace point whose metric reaches the
// threshold (>= when higher_is_better, <= otherwise); nullopt when never reached.
std::optional<long long> floats_to_reach(const std::vector<TracePoint>& trace, double threshold,
                                         bool higher_is_better = true);

struct WeightedCoreset {
  Pseudocoreset coreset;
  double weight = 1.0;
  Index num_data = 0;  // n_m of the owning client
};

struct ServerCoreset {
  std::vector<WeightedCoreset> entries;
  Index total_data_size = 0;
  int num_clients = 0;
};

// Weights w_m = M * n_m / N.
ServerCoreset aggregate_coresets(std::vector<Pseudocoreset> coresets, const std::vector<Index>& data_sizes);

// Float32s sent up-link for one coreset, plus label integers when labels are frozen one-hots.
struct CoresetCost {
  long long floats = 0;
  long long ints = 0;
};
CoresetCost coreset_cost(const Pseudocoreset& coreset);

struct BpcFlResult {
  ServerCoreset server;
  CommLedger ledger;
  std::vector<TrajectoryBank> banks;  // only when keep_banks was requested
};

inline const std::string kMethodBpcFl = "bpc-fl";
inline const std::string kMethodFedAvg = "fedavg";

struct BpcFlOptions {
  std::uint64_t master_seed = 0;
  int max_threads = 1;
  bool keep_banks = false;
};

BpcFlResult run_bpc_fl(const std::vector<DatasetShard>& shards, const MlpArchitecture& arch, const PriorSpec& prior,
                       const LikelihoodSpec& lik, const BpcFklConfig& cfg, const BpcFlOptions& options);

TargetDensity server_target(const ServerCoreset& sc, const MlpArchitecture& arch, const PriorSpec& prior,
                            const LikelihoodSpec& lik);

struct FedAvgConfig {
  int rounds = 100;
  int clients_per_round = 5;
  int local_steps = 10;
  OptConfig client{AdamSpec{}, 1e-2, 0};
  OptConfig server{AdamSpec{}, 0.1, 0};
  std::optional<ParamVector> init;
  // Traffic spent producing `init` (e.g. the BPC-FL up-link); recorded at round 0.
  CommLedger init_ledger;
  std::uint64_t seed = 0;
  // Prior precision of the local L2 term lambda/2 |theta|^2.
  double l2_precision = 0.0;

  void validate(int num_clients) const;
};

struct FedAvgResult {
  std::vector<ParamVector> params;  // params[r] after round r; params[0] is the start point
  std::vector<long long> floats_cum;  // cumulative ledger total after round r
  CommLedger ledger;
};

// Optional per-round callback (round, params, cumulative floats).
using RoundObserver = std::function<void(int, const ParamVector&, long long)>;

FedAvgResult run_fedavg(const std::vector<DatasetShard>& shards, const MlpArchitecture& arch,
                        const LikelihoodSpec& lik, const FedAvgConfig& cfg, const RoundObserver& observer = {});

}  // namespace bpcfl
