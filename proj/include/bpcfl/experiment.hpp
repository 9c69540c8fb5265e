#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "bpcfl/datagen.hpp"
#include "bpcfl/eval.hpp"
#include "bpcfl/federation.hpp"
#include "bpcfl/io.hpp"

namespace bpcfl {

// Raised for configs that fail to parse or validate (exit status 2).
class ConfigError : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

enum class TaskPreset { regression, moons };

struct DownstreamSpec {
  enum class Method { sgd, adam, hmc };
  Method method = Method::adam;
  OptConfig opt;   // sgd / adam
  HmcConfig hmc;   // hmc; started from the first MAP method's estimate when one precedes it
  std::string name() const;
};

struct DatasetSpec {
  RegressionGenConfig regression;
  MoonsGenConfig moons;
  double test_fraction = 0.0;  // withheld per client, excluded from training
  int test_points = 1000;      // moons: fresh test sample size
};

struct FedAvgSpec {
  FedAvgConfig base;
  bool warm_start = true;
  int eval_every = 1;
};

struct ReportSpec {
  double accuracy_threshold = 0.85;
  double rmse_threshold = 0.45;
};

struct ExperimentConfig {
  TaskPreset task = TaskPreset::regression;
  DatasetSpec dataset;
  MlpArchitecture arch;
  LikelihoodSpec lik;
  PriorSpec prior;
  BpcFklConfig bpc;
  FedAvgSpec fedavg;
  std::vector<DownstreamSpec> downstream;
  ReportSpec report;
  std::vector<std::uint64_t> seeds;
  std::string output_dir;
  int threads = 1;

  // Fully resolved JSON, defaults included.
  std::string resolved_json() const;
};

// Defaults for a preset as a JSON document.
std::string default_config_json(TaskPreset task);

// Parses and validates; unknown keys are errors. Throws ConfigError.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const fs::path& path);

struct SeedData {
  std::vector<DatasetShard> shards;
  Matrix test_inputs;
  Matrix test_targets;
  Matrix span_inputs;  // regression only: grid covering intervals and gaps
  Matrix span_targets;
};

SeedData make_data(const ExperimentConfig& cfg, std::uint64_t seed);

struct DownstreamResult {
  std::string name;
  MetricsRecord metrics;
  std::optional<double> gap_ratio;        // regression hmc
  std::optional<double> acceptance_rate;  // hmc
  std::vector<ParamVector> samples;       // one entry for MAP methods
};

std::vector<DownstreamResult> run_downstream(const ExperimentConfig& cfg, const ServerCoreset& server,
                                             const SeedData& data, std::uint64_t seed, long long floats_cum);

// MAP estimate of the first sgd/adam downstream method, as used for warm starts.
std::optional<ParamVector> coreset_map(const ExperimentConfig& cfg, const ServerCoreset& server, std::uint64_t seed);

// JSON array of per-method metrics and sample summaries.
std::string downstream_report_json(const std::vector<DownstreamResult>& results);

struct FedAvgTrace {
  std::vector<TraceRow> rows;
  CommLedger ledger;
  ParamVector final_params;
};

FedAvgTrace run_fedavg_traced(const ExperimentConfig& cfg, const SeedData& data, std::uint64_t seed,
                              const std::optional<ParamVector>& init, const CommLedger& init_ledger);

MetricsRecord evaluate_params(const ExperimentConfig& cfg, const ParamVector& params, const SeedData& data);

struct RunOptions {
  std::optional<std::uint64_t> seed;  // restrict to one seed
  std::optional<std::string> out;     // overrides output_dir
  bool quiet = false;
};

// Writes seed_<s>/ artifacts, aggregate.csv, ledger_report.csv and report.csv.
void run_experiment(const ExperimentConfig& cfg, const RunOptions& options);

// Metric-vs-floats table from the downstream.json and trace CSVs of every seed directory under `out`.
std::string render_report(const fs::path& out);

// Mean/std table over every seed directory under `out`.
std::string render_aggregate(const fs::path& out);

fs::path seed_dir(const fs::path& out, std::uint64_t seed);
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag);

}  // namespace bpcfl
