// bpcfl: config-driven runner for one-shot federated learning with Bayesian pseudocoresets.
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "bpcfl/experiment.hpp"

namespace {

using namespace bpcfl;
using json = nlohmann::json;

// A required artifact from an earlier stage is absent.
class MissingArtifact : public std::runtime_error {
 public:
  explicit MissingArtifact(const fs::path& p)
      : std::runtime_error("missing input artifact: " + p.string()) {}
};

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  bool dry_run = false;
  std::optional<int> client;
};

void add_common(CLI::App* cmd, Common& c, bool with_client) {
  cmd->add_option("--config", c.config, "experiment config (JSON)")->required();
  cmd->add_option("--seed", c.seed, "restrict to one seed");
  cmd->add_option("--out", c.out, "output directory (overrides output_dir)");
  cmd->add_flag("--dry-run", c.dry_run, "validate and print the resolved config, write nothing");
  if (with_client) cmd->add_option("--client", c.client, "only this client id");
}

fs::path out_dir(const ExperimentConfig& cfg, const Common& c) {
  return c.out ? fs::path(*c.out) : fs::path(cfg.output_dir);
}

std::uint64_t stage_seed(const ExperimentConfig& cfg, const Common& c) { return c.seed ? *c.seed : cfg.seeds.front(); }

fs::path require(const fs::path& p) {
  if (!fs::exists(p)) throw MissingArtifact(p);
  return p;
}

LabelMode label_mode(const ExperimentConfig& cfg) {
  return cfg.bpc.step_size_y > 0.0 ? LabelMode::learnable : LabelMode::frozen;
}

std::vector<DatasetShard> load_shards(const ExperimentConfig& cfg, const fs::path& dir) {
  return read_shards_csv(require(dir / "shards.csv"), cfg.arch.input_dim());
}

fs::path bank_dir(const fs::path& dir, int client) { return dir / ("bank_client" + std::to_string(client)); }
fs::path coreset_path(const fs::path& dir, int client) {
  return dir / ("coreset_client" + std::to_string(client) + ".csv");
}

bool selected(const Common& c, int client) { return !c.client || *c.client == client; }

void cmd_pretrain(const ExperimentConfig& cfg, const Common& c) {
  const std::uint64_t seed = stage_seed(cfg, c);
  const fs::path dir = seed_dir(out_dir(cfg, c), seed);
  const SeedData data = make_data(cfg, seed);
  write_shards_csv(dir / "shards.csv", data.shards);
  for (const DatasetShard& s : data.shards) {
    if (!selected(c, s.client_id)) continue;
    const TrajectoryBank bank = pretrain_bank(s, cfg.arch, cfg.prior, cfg.lik, cfg.bpc, seed,
                                              [&](int t, const std::string& why) {
                                                std::cerr << "client " << s.client_id << ": trajectory " << t
                                                          << " dropped: " << why << "\n";
                                              });
    write_bank(bank_dir(dir, s.client_id), bank);
    std::cerr << "client " << s.client_id << ": " << bank.trajectories.size() << " trajectories written\n";
  }
}

void cmd_learn_coreset(const ExperimentConfig& cfg, const Common& c) {
  const std::uint64_t seed = stage_seed(cfg, c);
  const fs::path dir = seed_dir(out_dir(cfg, c), seed);
  for (const DatasetShard& s : load_shards(cfg, dir)) {
    if (!selected(c, s.client_id)) continue;
    std::optional<TrajectoryBank> bank;
    if (fs::exists(bank_dir(dir, s.client_id))) bank = read_bank(bank_dir(dir, s.client_id));
    const Pseudocoreset cs =
        learn_coreset(s, cfg.arch, cfg.prior, cfg.lik, cfg.bpc, seed, bank ? &*bank : nullptr);
    write_coreset_csv(coreset_path(dir, s.client_id), cs);
  }
}

void cmd_aggregate(const ExperimentConfig& cfg, const Common& c) {
  const fs::path dir = seed_dir(out_dir(cfg, c), stage_seed(cfg, c));
  std::vector<Pseudocoreset> coresets;
  std::vector<Index> sizes;
  CommLedger ledger;
  for (const DatasetShard& s : load_shards(cfg, dir)) {
    Pseudocoreset cs = read_coreset_csv(require(coreset_path(dir, s.client_id)), s.client_id, label_mode(cfg));
    const CoresetCost cost = coreset_cost(cs);
    ledger.record({0, Direction::up, s.client_id, cost.floats, cost.ints, kMethodBpcFl});
    coresets.push_back(std::move(cs));
    sizes.push_back(s.train_size());
  }
  write_text(dir / "server_coreset.json", server_coreset_to_json(aggregate_coresets(std::move(coresets), sizes)));
  write_text(dir / "ledger_bpc.csv", ledger_csv(ledger));
}

void cmd_downstream(const ExperimentConfig& cfg, const Common& c) {
  const std::uint64_t seed = stage_seed(cfg, c);
  const fs::path dir = seed_dir(out_dir(cfg, c), seed);
  const ServerCoreset sc = server_coreset_from_json(read_text(require(dir / "server_coreset.json")));
  long long floats = 0;
  for (const WeightedCoreset& wc : sc.entries) floats += coreset_cost(wc.coreset).floats;
  const SeedData data = make_data(cfg, seed);
  const std::vector<DownstreamResult> results = run_downstream(cfg, sc, data, seed, floats);
  write_text(dir / "downstream.json", downstream_report_json(results));
  for (const DownstreamResult& r : results) {
    const PredictiveSummary p = predictive_mc(cfg.arch, r.samples, data.test_inputs, cfg.lik);
    std::string s;
    for (Index d = 0; d < data.test_inputs.cols(); ++d) s += (d ? ",x_" : "x_") + std::to_string(d);
    const Index cols = cfg.arch.output_dim();
    for (Index j = 0; j < cols; ++j) {
      s += p.task == Task::classification ? ",p_" + std::to_string(j)
                                          : ",mean_" + std::to_string(j) + ",std_" + std::to_string(j);
    }
    s += "\n";
    for (Index i = 0; i < data.test_inputs.rows(); ++i) {
      for (Index d = 0; d < data.test_inputs.cols(); ++d) s += (d ? "," : "") + format_real(data.test_inputs(i, d));
      for (Index j = 0; j < cols; ++j) {
        s += p.task == Task::classification
                 ? "," + format_real(p.probabilities(i, j))
                 : "," + format_real(p.mean(i, j)) + "," + format_real(p.stddev(i, j));
      }
      s += "\n";
    }
    write_text(dir / ("predictive_" + r.name + ".csv"), s);
  }
  std::cout << downstream_report_json(results);
}

void cmd_fedavg(const ExperimentConfig& cfg, const Common& c) {
  const std::uint64_t seed = stage_seed(cfg, c);
  const fs::path dir = seed_dir(out_dir(cfg, c), seed);
  SeedData data = make_data(cfg, seed);
  data.shards = load_shards(cfg, dir);
  const FedAvgTrace cold = run_fedavg_traced(cfg, data, seed, std::nullopt, CommLedger{});
  write_text(dir / "trace_fedavg_cold.csv", trace_csv(cold.rows));
  write_text(dir / "ledger_fedavg_cold.csv", ledger_csv(cold.ledger));
  if (!cfg.fedavg.warm_start || !fs::exists(dir / "server_coreset.json")) return;
  const ServerCoreset sc = server_coreset_from_json(read_text(dir / "server_coreset.json"));
  CommLedger init_ledger;
  for (const WeightedCoreset& wc : sc.entries) {
    const CoresetCost cost = coreset_cost(wc.coreset);
    init_ledger.record({0, Direction::up, wc.coreset.owner, cost.floats, cost.ints, kMethodBpcFl});
  }
  const std::optional<ParamVector> init = coreset_map(cfg, sc, seed);
  if (!init) return;
  const FedAvgTrace warm = run_fedavg_traced(cfg, data, seed, init, init_ledger);
  write_text(dir / "trace_fedavg_warm.csv", trace_csv(warm.rows));
  write_text(dir / "ledger_fedavg_warm.csv", ledger_csv(warm.ledger));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"One-shot Bayesian federated learning with pseudocoresets"};
  app.require_subcommand(1);

  Common run_opts, pre_opts, learn_opts, agg_opts, down_opts, fed_opts, rep_opts;
  bool print_defaults_moons = false;
  CLI::App* run = app.add_subcommand("run", "full pipeline for every seed");
  add_common(run, run_opts, false);
  CLI::App* pre = app.add_subcommand("pretrain", "generate shards and trajectory banks");
  add_common(pre, pre_opts, true);
  CLI::App* learn = app.add_subcommand("learn-coreset", "learn client coresets from shards (and banks)");
  add_common(learn, learn_opts, true);
  CLI::App* agg = app.add_subcommand("aggregate", "concatenate client coresets into a server coreset");
  add_common(agg, agg_opts, false);
  CLI::App* down = app.add_subcommand("downstream", "MAP / HMC inference on the server coreset");
  add_common(down, down_opts, false);
  CLI::App* fed = app.add_subcommand("fedavg", "FedAvg baseline, cold and warm-started");
  add_common(fed, fed_opts, false);
  CLI::App* rep = app.add_subcommand("report", "metric-vs-floats CSV over all seeds");
  add_common(rep, rep_opts, false);
  CLI::App* defaults = app.add_subcommand("defaults", "print the default regression (or --moons) config");
  defaults->add_flag("--moons", print_defaults_moons);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (defaults->parsed()) {
    std::cout << default_config_json(print_defaults_moons ? TaskPreset::moons : TaskPreset::regression);
    return 0;
  }

  const Common* common = nullptr;
  for (auto [cmd, opts] : {std::pair{run, &run_opts}, {pre, &pre_opts}, {learn, &learn_opts}, {agg, &agg_opts},
                           {down, &down_opts}, {fed, &fed_opts}, {rep, &rep_opts}}) {
    if (cmd->parsed()) common = opts;
  }

  ExperimentConfig cfg;
  try {
    cfg = load_config(common->config);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }

  if (common->dry_run) {
    ExperimentConfig echo = cfg;
    if (common->out) echo.output_dir = *common->out;
    if (common->seed) echo.seeds = {*common->seed};
    std::cout << echo.resolved_json();
    return 0;
  }

  try {
    if (run->parsed()) {
      RunOptions o;
      o.seed = common->seed;
      o.out = common->out;
      run_experiment(cfg, o);
    } else if (pre->parsed()) {
      cmd_pretrain(cfg, *common);
    } else if (learn->parsed()) {
      cmd_learn_coreset(cfg, *common);
    } else if (agg->parsed()) {
      cmd_aggregate(cfg, *common);
    } else if (down->parsed()) {
      cmd_downstream(cfg, *common);
    } else if (fed->parsed()) {
      cmd_fedavg(cfg, *common);
    } else if (rep->parsed()) {
      const std::string report = render_report(out_dir(cfg, *common));
      write_text(out_dir(cfg, *common) / "report.csv", report);
      std::cout << report;
    }
  } catch (const MissingArtifact& e) {
    std::cerr << "error [io]: " << e.what() << "\n";
    return 1;
  } catch (const NumericalError& e) {
    std::cerr << "error [numerics]: " << e.what() << "\n";
    return 1;
  } catch (const InvalidArgument& e) {
    std::cerr << "error [input]: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
