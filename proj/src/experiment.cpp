#include "bpcfl/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <map>
#include <set>

#include <json.hpp>

namespace bpcfl {

namespace {

using json = nlohmann::json;

constexpr std::uint64_t kTagData = 0x64617461;
constexpr std::uint64_t kTagMapInit = 0x6d617069;
constexpr std::uint64_t kTagHmc = 0x686d6373;
constexpr std::uint64_t kTagFedAvg = 0x66617667;
constexpr std::uint64_t kTagTest = 0x74657374;
constexpr std::uint64_t kTagSplit = 0x73706c74;

// Strict view of a JSON object: every key must be consumed by a getter.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + "expected an object");
  }

  template <typename T>
  T get(const std::string& key) {
    used_.insert(key);
    if (!j_.contains(key)) throw ConfigError(where() + "missing key '" + key + "'");
    try {
      return j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(where() + "wrong type for '" + key + "'");
    }
  }

  template <typename T>
  T get_or(const std::string& key, T fallback) {
    if (!j_.contains(key)) {
      used_.insert(key);
      return fallback;
    }
    return get<T>(key);
  }

  const json& sub(const std::string& key) {
    used_.insert(key);
    if (!j_.contains(key)) throw ConfigError(where() + "missing key '" + key + "'");
    return j_.at(key);
  }

  bool has(const std::string& key) const { return j_.contains(key); }
  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!used_.count(item.key())) throw ConfigError("unknown config key '" + child(item.key()) + "'");
    }
  }

 private:
  std::string where() const { return path_.empty() ? "config: " : "config '" + path_ + "': "; }

  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

// Objects whose shape depends on a discriminator; replaced wholesale rather than merged.
const std::set<std::string> kReplacedPaths = {"architecture.group_norm", "bpc.sampler", "fedavg.client.optimizer",
                                              "fedavg.server.optimizer", "downstream"};

json merge_strict(const json& defaults, const json& user, const std::string& path) {
  json out = defaults;
  for (const auto& item : user.items()) {
    const std::string p = path.empty() ? item.key() : path + "." + item.key();
    if (!defaults.contains(item.key())) throw ConfigError("unknown config key '" + p + "'");
    const json& d = defaults.at(item.key());
    if (kReplacedPaths.count(p) || !d.is_object() || !item.value().is_object()) {
      out[item.key()] = item.value();
    } else {
      out[item.key()] = merge_strict(d, item.value(), p);
    }
  }
  return out;
}

json optimizer_to_json(const std::variant<SgdSpec, AdamSpec>& o) {
  if (const auto* s = std::get_if<SgdSpec>(&o)) return {{"type", "sgd"}, {"momentum", s->momentum}};
  const auto& a = std::get<AdamSpec>(o);
  return {{"type", "adam"}, {"beta1", a.beta1}, {"beta2", a.beta2}, {"epsilon", a.epsilon}};
}

std::variant<SgdSpec, AdamSpec> optimizer_from_json(const json& j, const std::string& path) {
  Reader r(j, path);
  const std::string type = r.get<std::string>("type");
  std::variant<SgdSpec, AdamSpec> out;
  if (type == "sgd") {
    SgdSpec s;
    s.momentum = r.get_or("momentum", s.momentum);
    out = s;
  } else if (type == "adam") {
    AdamSpec a;
    a.beta1 = r.get_or("beta1", a.beta1);
    a.beta2 = r.get_or("beta2", a.beta2);
    a.epsilon = r.get_or("epsilon", a.epsilon);
    out = a;
  } else {
    throw ConfigError("config '" + path + "': optimizer type must be sgd or adam");
  }
  r.finish();
  return out;
}

json downstream_to_json(const DownstreamSpec& d) {
  switch (d.method) {
    case DownstreamSpec::Method::sgd: {
      const double momentum = std::get<SgdSpec>(d.opt.optimizer).momentum;
      return {{"method", "sgd"}, {"step_size", d.opt.step_size}, {"num_steps", d.opt.num_steps}, {"momentum", momentum}};
    }
    case DownstreamSpec::Method::adam:
      return {{"method", "adam"}, {"step_size", d.opt.step_size}, {"num_steps", d.opt.num_steps}};
    case DownstreamSpec::Method::hmc:
      return {{"method", "hmc"},
              {"step_size", d.hmc.step_size},
              {"num_integration_steps", d.hmc.num_integration_steps},
              {"inverse_mass_diag", d.hmc.inverse_mass_diag},
              {"num_steps", d.hmc.num_steps},
              {"num_samples_kept", d.hmc.num_samples_kept}};
  }
  return {};
}

DownstreamSpec downstream_from_json(const json& j, const std::string& path) {
  Reader r(j, path);
  const std::string method = r.get<std::string>("method");
  DownstreamSpec d;
  if (method == "sgd" || method == "adam") {
    d.method = method == "sgd" ? DownstreamSpec::Method::sgd : DownstreamSpec::Method::adam;
    d.opt.step_size = r.get<double>("step_size");
    d.opt.num_steps = r.get<int>("num_steps");
    if (method == "sgd") {
      d.opt.optimizer = SgdSpec{r.get_or("momentum", 0.0)};
    } else {
      d.opt.optimizer = AdamSpec{};
    }
    d.opt.validate();
  } else if (method == "hmc") {
    d.method = DownstreamSpec::Method::hmc;
    d.hmc.step_size = r.get<double>("step_size");
    d.hmc.num_integration_steps = r.get<int>("num_integration_steps");
    d.hmc.inverse_mass_diag = r.get<double>("inverse_mass_diag");
    d.hmc.num_steps = r.get<int>("num_steps");
    d.hmc.num_samples_kept = r.get<int>("num_samples_kept");
    d.hmc.validate();
  } else {
    throw ConfigError("config '" + path + "': method must be sgd, adam or hmc");
  }
  r.finish();
  return d;
}

json intervals_to_json(const std::vector<Interval>& v) {
  json out = json::array();
  for (const Interval& i : v) out.push_back({i.lo, i.hi});
  return out;
}

json to_json(const ExperimentConfig& c) {
  json j;
  j["task"] = c.task == TaskPreset::regression ? "regression" : "moons";
  if (c.task == TaskPreset::regression) {
    const RegressionGenConfig& r = c.dataset.regression;
    j["dataset"] = {{"intervals", intervals_to_json(r.intervals)},
                    {"noise_std", r.noise_std},
                    {"num_clients", r.num_clients},
                    {"points_per_client", r.points_per_client},
                    {"dirichlet_alpha", r.dirichlet_alpha},
                    {"grid_points_per_interval", r.grid_points_per_interval},
                    {"span_grid_points", r.span_grid_points},
                    {"test_fraction", c.dataset.test_fraction}};
  } else {
    const MoonsGenConfig& m = c.dataset.moons;
    j["dataset"] = {{"points_per_client", m.points_per_client},
                    {"num_clients", m.num_clients},
                    {"noise_std", m.noise_std},
                    {"test_points", c.dataset.test_points},
                    {"test_fraction", c.dataset.test_fraction}};
  }
  json gn = nullptr;
  if (c.arch.group_norm) gn = {{"num_groups", c.arch.group_norm->num_groups}, {"epsilon", c.arch.group_norm->epsilon}};
  j["architecture"] = {{"layer_widths", c.arch.layer_widths},
                       {"activation", to_string(c.arch.activation)},
                       {"group_norm", gn}};
  if (c.lik.kind == LikelihoodSpec::Kind::gaussian) {
    j["likelihood"] = {{"kind", "gaussian"}, {"sigma", c.lik.sigma}};
  } else {
    j["likelihood"] = {{"kind", "categorical"}};
  }
  j["prior"] = {{"precision", c.prior.precision}};
  const BpcFklConfig& b = c.bpc;
  j["bpc"] = {{"coreset_size", b.coreset_size},
              {"sigma_z", b.sigma_z},
              {"step_size_x", b.step_size_x},
              {"step_size_y", b.step_size_y},
              {"num_updates", b.num_updates},
              {"coreset_chain_length", b.coreset_chain_length},
              {"data_chain_length", b.data_chain_length},
              {"num_noise_samples", b.num_noise_samples},
              {"sigma_eps", b.sigma_eps},
              {"sampler", optimizer_to_json(b.sampler)},
              {"sampler_step_size", b.sampler_step_size},
              {"batch_trajectories", b.batch_trajectories},
              {"pretrain",
               {{"num_trajectories", b.pretrain.num_trajectories},
                {"num_steps", b.pretrain.num_steps},
                {"save_interval", b.pretrain.save_interval},
                {"step_size", b.pretrain.step_size},
                {"batch_size", b.pretrain.batch_size},
                {"seed_base", b.pretrain.seed_base}}}};
  const FedAvgConfig& f = c.fedavg.base;
  j["fedavg"] = {{"rounds", f.rounds},
                 {"clients_per_round", f.clients_per_round},
                 {"local_steps", f.local_steps},
                 {"client", {{"optimizer", optimizer_to_json(f.client.optimizer)}, {"step_size", f.client.step_size}}},
                 {"server", {{"optimizer", optimizer_to_json(f.server.optimizer)}, {"step_size", f.server.step_size}}},
                 {"l2_precision", f.l2_precision},
                 {"warm_start", c.fedavg.warm_start},
                 {"eval_every", c.fedavg.eval_every}};
  j["downstream"] = json::array();
  for (const DownstreamSpec& d : c.downstream) j["downstream"].push_back(downstream_to_json(d));
  j["report"] = {{"accuracy_threshold", c.report.accuracy_threshold}, {"rmse_threshold", c.report.rmse_threshold}};
  j["seeds"] = c.seeds;
  j["output_dir"] = c.output_dir;
  j["threads"] = c.threads;
  return j;
}

ExperimentConfig preset(TaskPreset task) {
  ExperimentConfig c;
  c.task = task;
  c.seeds = {0, 1, 2, 3, 4};
  if (task == TaskPreset::regression) {
    c.arch = MlpArchitecture::regression_mlp();
    c.lik = LikelihoodSpec::gaussian(0.3);
    c.prior.precision = 1e-2;
    c.bpc = BpcFklConfig::regression_preset();
    c.fedavg.base.client = {AdamSpec{}, 1e-2, 0};
    c.fedavg.base.server = {AdamSpec{}, 0.1, 0};
    DownstreamSpec adam;
    adam.method = DownstreamSpec::Method::adam;
    adam.opt = {AdamSpec{}, 1e-2, 300};
    DownstreamSpec hmc;
    hmc.method = DownstreamSpec::Method::hmc;
    hmc.hmc = {1e-3, 20, 50.0, 200, 40, 0};
    c.downstream = {adam, hmc};
    c.output_dir = "out/regression";
  } else {
    c.arch = MlpArchitecture::classification_mlp();
    c.lik = LikelihoodSpec::categorical();
    c.prior.precision = 1e-1;
    c.bpc = BpcFklConfig::moons_preset();
    c.fedavg.base.client = {AdamSpec{}, 1e-2, 0};
    c.fedavg.base.server = {AdamSpec{}, 0.1, 0};
    DownstreamSpec sgd;
    sgd.method = DownstreamSpec::Method::sgd;
    sgd.opt = {SgdSpec{}, 2e-2, 500};
    DownstreamSpec hmc;
    hmc.method = DownstreamSpec::Method::hmc;
    hmc.hmc = {2e-3, 30, 100.0, 100, 50, 0};
    c.downstream = {sgd, hmc};
    c.output_dir = "out/moons";
  }
  c.fedavg.base.rounds = 100;
  c.fedavg.base.clients_per_round = 5;
  c.fedavg.base.local_steps = 10;
  c.fedavg.base.l2_precision = c.prior.precision;
  return c;
}

OptConfig fedavg_side_from_json(const json& j, const std::string& path) {
  Reader s(j, path);
  OptConfig o{optimizer_from_json(s.sub("optimizer"), path + ".optimizer"), s.get<double>("step_size"), 0};
  s.finish();
  return o;
}

ExperimentConfig from_json(const json& j) {
  Reader root(j, "");
  ExperimentConfig c;
  const std::string task = root.get<std::string>("task");
  if (task == "regression") {
    c.task = TaskPreset::regression;
  } else if (task == "moons") {
    c.task = TaskPreset::moons;
  } else {
    throw ConfigError("config 'task' must be regression or moons");
  }

  {
    Reader r(root.sub("dataset"), "dataset");
    if (c.task == TaskPreset::regression) {
      RegressionGenConfig& g = c.dataset.regression;
      g.intervals.clear();
      for (const auto& p : r.get<std::vector<std::vector<double>>>("intervals")) {
        if (p.size() != 2) throw ConfigError("config 'dataset.intervals': each interval is [lo, hi]");
        g.intervals.push_back({p[0], p[1]});
      }
      g.noise_std = r.get<double>("noise_std");
      g.num_clients = r.get<int>("num_clients");
      g.points_per_client = r.get<int>("points_per_client");
      g.dirichlet_alpha = r.get<std::vector<double>>("dirichlet_alpha");
      g.grid_points_per_interval = r.get<int>("grid_points_per_interval");
      g.span_grid_points = r.get<int>("span_grid_points");
      g.validate();
    } else {
      MoonsGenConfig& g = c.dataset.moons;
      g.points_per_client = r.get<int>("points_per_client");
      g.num_clients = r.get<int>("num_clients");
      g.noise_std = r.get<double>("noise_std");
      c.dataset.test_points = r.get<int>("test_points");
      if (c.dataset.test_points < 1) throw ConfigError("config 'dataset.test_points' must be positive");
      g.validate();
    }
    c.dataset.test_fraction = r.get<double>("test_fraction");
    if (!(c.dataset.test_fraction >= 0.0 && c.dataset.test_fraction < 1.0)) {
      throw ConfigError("config 'dataset.test_fraction' must be in [0, 1)");
    }
    r.finish();
  }

  {
    Reader r(root.sub("architecture"), "architecture");
    c.arch.layer_widths = r.get<std::vector<int>>("layer_widths");
    c.arch.activation = activation_from_string(r.get<std::string>("activation"));
    const json& gn = r.sub("group_norm");
    if (!gn.is_null()) {
      Reader g(gn, "architecture.group_norm");
      GroupNormSpec spec;
      spec.num_groups = g.get_or("num_groups", spec.num_groups);
      spec.epsilon = g.get_or("epsilon", spec.epsilon);
      g.finish();
      c.arch.group_norm = spec;
    }
    c.arch.task = c.task == TaskPreset::regression ? Task::regression : Task::classification;
    r.finish();
    c.arch.validate();
  }

  {
    Reader r(root.sub("likelihood"), "likelihood");
    const std::string kind = r.get<std::string>("kind");
    if (kind == "gaussian") {
      c.lik = LikelihoodSpec::gaussian(r.get<double>("sigma"));
    } else if (kind == "categorical") {
      c.lik = LikelihoodSpec::categorical();
    } else {
      throw ConfigError("config 'likelihood.kind' must be gaussian or categorical");
    }
    r.finish();
    c.lik.validate();
    const bool gaussian = c.lik.kind == LikelihoodSpec::Kind::gaussian;
    if (gaussian != (c.task == TaskPreset::regression)) {
      throw ConfigError("config: regression needs a gaussian likelihood, moons a categorical one");
    }
  }

  {
    Reader r(root.sub("prior"), "prior");
    c.prior.precision = r.get<double>("precision");
    r.finish();
    c.prior.validate();
  }

  {
    Reader r(root.sub("bpc"), "bpc");
    BpcFklConfig& b = c.bpc;
    b.coreset_size = r.get<int>("coreset_size");
    b.sigma_z = r.get<double>("sigma_z");
    b.step_size_x = r.get<double>("step_size_x");
    b.step_size_y = r.get<double>("step_size_y");
    b.num_updates = r.get<int>("num_updates");
    b.coreset_chain_length = r.get<int>("coreset_chain_length");
    b.data_chain_length = r.get<int>("data_chain_length");
    b.num_noise_samples = r.get<int>("num_noise_samples");
    b.sigma_eps = r.get<double>("sigma_eps");
    b.sampler = optimizer_from_json(r.sub("sampler"), "bpc.sampler");
    b.sampler_step_size = r.get<double>("sampler_step_size");
    b.batch_trajectories = r.get<int>("batch_trajectories");
    Reader p(r.sub("pretrain"), "bpc.pretrain");
    b.pretrain.num_trajectories = p.get<int>("num_trajectories");
    b.pretrain.num_steps = p.get<int>("num_steps");
    b.pretrain.save_interval = p.get<int>("save_interval");
    b.pretrain.step_size = p.get<double>("step_size");
    b.pretrain.batch_size = p.get<int>("batch_size");
    b.pretrain.seed_base = p.get<std::uint64_t>("seed_base");
    p.finish();
    r.finish();
    b.validate();
  }

  {
    Reader r(root.sub("fedavg"), "fedavg");
    FedAvgConfig& f = c.fedavg.base;
    f.rounds = r.get<int>("rounds");
    f.clients_per_round = r.get<int>("clients_per_round");
    f.local_steps = r.get<int>("local_steps");
    f.client = fedavg_side_from_json(r.sub("client"), "fedavg.client");
    f.server = fedavg_side_from_json(r.sub("server"), "fedavg.server");
    f.l2_precision = r.get<double>("l2_precision");
    c.fedavg.warm_start = r.get<bool>("warm_start");
    c.fedavg.eval_every = r.get<int>("eval_every");
    if (c.fedavg.eval_every < 1) throw ConfigError("config 'fedavg.eval_every' must be positive");
    r.finish();
    const int clients =
        c.task == TaskPreset::regression ? c.dataset.regression.num_clients : c.dataset.moons.num_clients;
    f.validate(clients);
  }

  {
    const json& list = root.sub("downstream");
    if (!list.is_array() || list.empty()) throw ConfigError("config 'downstream' must be a non-empty list");
    for (std::size_t i = 0; i < list.size(); ++i) {
      c.downstream.push_back(downstream_from_json(list[i], "downstream[" + std::to_string(i) + "]"));
    }
  }

  {
    Reader r(root.sub("report"), "report");
    c.report.accuracy_threshold = r.get<double>("accuracy_threshold");
    c.report.rmse_threshold = r.get<double>("rmse_threshold");
    r.finish();
  }

  c.seeds = root.get<std::vector<std::uint64_t>>("seeds");
  if (c.seeds.empty()) throw ConfigError("config 'seeds' must be non-empty");
  c.output_dir = root.get<std::string>("output_dir");
  c.threads = root.get<int>("threads");
  if (c.threads < 1) throw ConfigError("config 'threads' must be positive");
  root.finish();
  return c;
}

Matrix stack_rows(const std::vector<Matrix>& parts) {
  Index rows = 0;
  for (const Matrix& m : parts) rows += m.rows();
  Matrix out(rows, parts.empty() ? 0 : parts[0].cols());
  Index at = 0;
  for (const Matrix& m : parts) {
    out.middleRows(at, m.rows()) = m;
    at += m.rows();
  }
  return out;
}

json metrics_to_json(const MetricsRecord& m) {
  json j = {{"nll", m.nll}, {"floats_cum", m.floats_cum}};
  if (m.accuracy) j["accuracy"] = *m.accuracy;
  if (m.ece) j["ece"] = *m.ece;
  if (m.rmse) j["rmse"] = *m.rmse;
  return j;
}

json ledger_totals_json(const CommLedger& l) {
  json j = json::object();
  std::set<std::string> methods;
  for (const CommEvent& e : l.events()) methods.insert(e.method);
  for (const std::string& m : methods) {
    long long up = 0, down = 0, events = 0;
    for (const CommEvent& e : l.events()) {
      if (e.method != m) continue;
      ++events;
      (e.direction == Direction::up ? up : down) += e.float32_count;
    }
    j[m] = {{"float32_total", comm_totals(l, m)},
            {"int_total", comm_totals_ints(l, m)},
            {"up", up},
            {"down", down},
            {"events", events}};
  }
  return j;
}

void log_line(const RunOptions& o, const std::string& s) {
  if (!o.quiet) std::cerr << s << std::endl;
}

std::vector<std::uint64_t> seed_dirs_in(const fs::path& out) {
  std::vector<std::uint64_t> seeds;
  if (!fs::is_directory(out)) throw InvalidArgument("missing output directory " + out.string());
  for (const auto& entry : fs::directory_iterator(out)) {
    const std::string name = entry.path().filename().string();
    if (entry.is_directory() && name.rfind("seed_", 0) == 0) seeds.push_back(std::stoull(name.substr(5)));
  }
  std::sort(seeds.begin(), seeds.end());
  if (seeds.empty()) throw InvalidArgument("no seed_<n> directories under " + out.string());
  return seeds;
}

std::vector<std::uint64_t> seeds_in(const fs::path& out) {
  std::vector<std::uint64_t> seeds;
  if (!fs::is_directory(out)) throw InvalidArgument("missing output directory " + out.string());
  for (const auto& entry : fs::directory_iterator(out)) {
    const std::string name = entry.path().filename().string();
    if (entry.is_directory() && name.rfind("seed_", 0) == 0 && fs::exists(entry.path() / "result.json")) {
      seeds.push_back(std::stoull(name.substr(5)));
    }
  }
  std::sort(seeds.begin(), seeds.end());
  if (seeds.empty()) throw InvalidArgument("no seed_<n>/result.json under " + out.string());
  return seeds;
}

}  // namespace

std::string DownstreamSpec::name() const {
  switch (method) {
    case Method::sgd:
      return "sgd";
    case Method::adam:
      return "adam";
    case Method::hmc:
      return "hmc";
  }
  return "?";
}

std::string downstream_report_json(const std::vector<DownstreamResult>& results) {
  json out = json::array();
  for (const DownstreamResult& r : results) {
    json e = {{"method", r.name}, {"metrics", metrics_to_json(r.metrics)}, {"num_samples", r.samples.size()}};
    if (r.gap_ratio) e["gap_ratio"] = *r.gap_ratio;
    if (r.acceptance_rate) e["acceptance_rate"] = *r.acceptance_rate;
    out.push_back(e);
  }
  return out.dump(2) + "\n";
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) { return derive_rng(seed, 0, tag)(); }

fs::path seed_dir(const fs::path& out, std::uint64_t seed) { return out / ("seed_" + std::to_string(seed)); }

std::string ExperimentConfig::resolved_json() const { return to_json(*this).dump(2) + "\n"; }

std::string default_config_json(TaskPreset task) { return preset(task).resolved_json(); }

ExperimentConfig parse_config(const std::string& text) {
  json user;
  try {
    user = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!user.is_object()) throw ConfigError("config must be a JSON object");
  if (!user.contains("task") || !user["task"].is_string()) throw ConfigError("config needs a string 'task'");
  const std::string task = user["task"].get<std::string>();
  if (task != "regression" && task != "moons") throw ConfigError("config 'task' must be regression or moons");
  const TaskPreset t = task == "regression" ? TaskPreset::regression : TaskPreset::moons;
  const json merged = merge_strict(to_json(preset(t)), user, "");
  try {
    return from_json(merged);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

ExperimentConfig load_config(const fs::path& path) {
  std::string text;
  try {
    text = read_text(path);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return parse_config(text);
}

SeedData make_data(const ExperimentConfig& cfg, std::uint64_t seed) {
  SeedData d;
  if (cfg.task == TaskPreset::regression) {
    RegressionGenConfig g = cfg.dataset.regression;
    g.seed = derive_seed(seed, kTagData);
    RegressionData r = gen_interval_regression(g);
    d.shards = std::move(r.shards);
    d.test_inputs = std::move(r.test_inputs);
    d.test_targets = std::move(r.test_targets);
    d.span_inputs = std::move(r.span_inputs);
    d.span_targets = std::move(r.span_targets);
  } else {
    MoonsGenConfig g = cfg.dataset.moons;
    g.seed = derive_seed(seed, kTagData);
    d.shards = gen_moons(g);
    Rng rng = derive_rng(seed, 0, kTagTest);
    LabeledPoints test = sample_moons(cfg.dataset.test_points, g.noise_std, rng);
    d.test_inputs = std::move(test.inputs);
    d.test_targets = std::move(test.targets);
  }
  if (cfg.dataset.test_fraction > 0.0) {
    std::vector<Matrix> xs, ys;
    for (DatasetShard& s : d.shards) {
      s = split_train_test(s, cfg.dataset.test_fraction, derive_seed(seed, kTagSplit + s.client_id));
      xs.push_back(s.test_inputs());
      ys.push_back(s.test_targets());
    }
    // Withheld client rows replace the generated test set for classification.
    if (cfg.task == TaskPreset::moons) {
      d.test_inputs = stack_rows(xs);
      d.test_targets = stack_rows(ys);
    }
  }
  return d;
}

MetricsRecord evaluate_params(const ExperimentConfig& cfg, const ParamVector& params, const SeedData& data) {
  return metrics_bundle(predictive_mc(cfg.arch, {params}, data.test_inputs, cfg.lik), data.test_targets);
}

std::vector<DownstreamResult> run_downstream(const ExperimentConfig& cfg, const ServerCoreset& server,
                                             const SeedData& data, std::uint64_t seed, long long floats_cum) {
  const TargetDensity target = server_target(server, cfg.arch, cfg.prior, cfg.lik);
  const ParamVector start = init_params(cfg.arch, derive_seed(seed, kTagMapInit));
  std::optional<ParamVector> map_estimate;
  std::vector<DownstreamResult> out;
  for (const DownstreamSpec& d : cfg.downstream) {
    DownstreamResult r;
    r.name = d.name();
    if (d.method == DownstreamSpec::Method::hmc) {
      HmcConfig h = d.hmc;
      h.seed = derive_seed(seed, kTagHmc + out.size());
      HmcResult s = hmc_sample(target, map_estimate ? *map_estimate : start, h);
      r.acceptance_rate = s.acceptance_rate;
      r.samples = std::move(s.samples);
    } else {
      r.samples.push_back(map_optimize(target, start, d.opt));
      if (!map_estimate) map_estimate = r.samples.back();
    }
    r.metrics = metrics_bundle(predictive_mc(cfg.arch, r.samples, data.test_inputs, cfg.lik), data.test_targets);
    r.metrics.floats_cum = floats_cum;
    if (cfg.task == TaskPreset::regression && d.method == DownstreamSpec::Method::hmc) {
      const PredictiveSummary span = predictive_mc(cfg.arch, r.samples, data.span_inputs, cfg.lik);
      r.gap_ratio = uncertainty_gap_ratio(data.span_inputs, span.stddev, cfg.dataset.regression.intervals);
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::optional<ParamVector> coreset_map(const ExperimentConfig& cfg, const ServerCoreset& server, std::uint64_t seed) {
  for (const DownstreamSpec& d : cfg.downstream) {
    if (d.method == DownstreamSpec::Method::hmc) continue;
    const TargetDensity target = server_target(server, cfg.arch, cfg.prior, cfg.lik);
    return map_optimize(target, init_params(cfg.arch, derive_seed(seed, kTagMapInit)), d.opt);
  }
  return std::nullopt;
}

FedAvgTrace run_fedavg_traced(const ExperimentConfig& cfg, const SeedData& data, std::uint64_t seed,
                              const std::optional<ParamVector>& init, const CommLedger& init_ledger) {
  FedAvgConfig f = cfg.fedavg.base;
  f.seed = derive_seed(seed, kTagFedAvg);
  f.init = init;
  f.init_ledger = init_ledger;
  FedAvgTrace trace;
  const int every = cfg.fedavg.eval_every;
  const RoundObserver observer = [&](int round, const ParamVector& params, long long floats) {
    if (round % every != 0 && round != f.rounds) return;
    TraceRow row;
    row.round = round;
    row.metrics = evaluate_params(cfg, params, data);
    row.metrics.floats_cum = floats;
    trace.rows.push_back(row);
  };
  FedAvgResult res = run_fedavg(data.shards, cfg.arch, cfg.lik, f, observer);
  trace.ledger = std::move(res.ledger);
  trace.final_params = res.params.back();
  return trace;
}

void run_experiment(const ExperimentConfig& cfg, const RunOptions& options) {
  const fs::path out = options.out ? fs::path(*options.out) : fs::path(cfg.output_dir);
  std::vector<std::uint64_t> seeds = cfg.seeds;
  if (options.seed) seeds = {*options.seed};
  ExperimentConfig echo = cfg;
  echo.output_dir = out.string();
  echo.seeds = seeds;
  write_text(out / "resolved_config.json", echo.resolved_json());

  for (std::uint64_t seed : seeds) {
    const fs::path dir = seed_dir(out, seed);
    log_line(options, "seed " + std::to_string(seed) + ": generating data");
    const SeedData data = make_data(cfg, seed);
    write_shards_csv(dir / "shards.csv", data.shards);

    log_line(options, "seed " + std::to_string(seed) + ": learning coresets");
    BpcFlOptions bo;
    bo.master_seed = seed;
    bo.max_threads = cfg.threads;
    const BpcFlResult bpc = run_bpc_fl(data.shards, cfg.arch, cfg.prior, cfg.lik, cfg.bpc, bo);
    for (const WeightedCoreset& wc : bpc.server.entries) {
      write_coreset_csv(dir / ("coreset_client" + std::to_string(wc.coreset.owner) + ".csv"), wc.coreset);
    }
    write_text(dir / "server_coreset.json", server_coreset_to_json(bpc.server));

    log_line(options, "seed " + std::to_string(seed) + ": downstream inference");
    const long long bpc_floats = bpc.ledger.total_floats();
    const std::vector<DownstreamResult> down = run_downstream(cfg, bpc.server, data, seed, bpc_floats);

    log_line(options, "seed " + std::to_string(seed) + ": fedavg");
    const FedAvgTrace cold = run_fedavg_traced(cfg, data, seed, std::nullopt, CommLedger{});
    write_text(dir / "trace_fedavg_cold.csv", trace_csv(cold.rows));
    std::optional<FedAvgTrace> warm;
    std::optional<ParamVector> map_estimate;
    for (const DownstreamResult& r : down) {
      if (r.name != "hmc") {
        map_estimate = r.samples.front();
        break;
      }
    }
    if (cfg.fedavg.warm_start && map_estimate) {
      warm = run_fedavg_traced(cfg, data, seed, map_estimate, bpc.ledger);
      write_text(dir / "trace_fedavg_warm.csv", trace_csv(warm->rows));
    }

    CommLedger all = bpc.ledger;
    all.append(cold.ledger);
    write_text(dir / "ledger.csv", ledger_csv(all));

    json result;
    result["seed"] = seed;
    result["config"] = json::parse(echo.resolved_json());
    result["bpc_fl"] = {{"float32_total", bpc.ledger.total_floats()},
                        {"int_total", bpc.ledger.total_ints()},
                        {"events", bpc.ledger.events().size()}};
    const std::string down_json = downstream_report_json(down);
    write_text(dir / "downstream.json", down_json);
    result["downstream"] = json::parse(down_json);
    auto trace_json = [&](const FedAvgTrace& t) {
      json rows = json::array();
      for (const TraceRow& row : t.rows) {
        json m = metrics_to_json(row.metrics);
        m["round"] = row.round;
        rows.push_back(m);
      }
      std::vector<TracePoint> acc;
      for (const TraceRow& row : t.rows) {
        const double metric = cfg.task == TaskPreset::moons ? row.metrics.accuracy.value_or(0.0) : *row.metrics.rmse;
        acc.push_back({row.round, row.metrics.floats_cum, metric});
      }
      const bool moons = cfg.task == TaskPreset::moons;
      const auto reach = floats_to_reach(acc, moons ? cfg.report.accuracy_threshold : cfg.report.rmse_threshold, moons);
      json j = {{"rounds", rows}, {"ledger", ledger_totals_json(t.ledger)}};
      j["floats_to_threshold"] = reach ? json(*reach) : json(nullptr);
      return j;
    };
    result["fedavg_cold"] = trace_json(cold);
    if (warm) result["fedavg_warm"] = trace_json(*warm);
    write_text(dir / "result.json", result.dump(2) + "\n");
  }

  write_text(out / "aggregate.csv", render_aggregate(out));
  write_text(out / "report.csv", render_report(out));

  std::string ledger = "seed,method,float32_total,int_total,events\n";
  for (std::uint64_t seed : seeds_in(out)) {
    const json r = json::parse(read_text(seed_dir(out, seed) / "result.json"));
    ledger += std::to_string(seed) + "," + kMethodBpcFl + "," + std::to_string(r["bpc_fl"]["float32_total"].get<long long>()) +
              "," + std::to_string(r["bpc_fl"]["int_total"].get<long long>()) + "," +
              std::to_string(r["bpc_fl"]["events"].get<long long>()) + "\n";
    for (const char* run : {"fedavg_cold", "fedavg_warm"}) {
      if (!r.contains(run)) continue;
      const json& l = r[run]["ledger"];
      for (const auto& item : l.items()) {
        ledger += std::to_string(seed) + "," + run + "/" + item.key() + "," +
                  std::to_string(item.value()["float32_total"].get<long long>()) + "," +
                  std::to_string(item.value()["int_total"].get<long long>()) + "," +
                  std::to_string(item.value()["events"].get<long long>()) + "\n";
      }
    }
  }
  write_text(out / "ledger_report.csv", ledger);
}

std::string render_aggregate(const fs::path& out) {
  std::map<std::string, std::vector<double>> values;
  std::map<std::string, int> not_reached;
  for (std::uint64_t seed : seeds_in(out)) {
    const json r = json::parse(read_text(seed_dir(out, seed) / "result.json"));
    auto add_metrics = [&](const std::string& prefix, const json& m) {
      for (const char* key : {"nll", "accuracy", "ece", "rmse"}) {
        if (m.contains(key)) values[prefix + "/" + key].push_back(m[key].get<double>());
      }
    };
    values["bpc-fl/float32_total"].push_back(r["bpc_fl"]["float32_total"].get<double>());
    values["bpc-fl/int_total"].push_back(r["bpc_fl"]["int_total"].get<double>());
    for (const json& d : r["downstream"]) {
      const std::string prefix = "bpc-fl/" + d["method"].get<std::string>();
      add_metrics(prefix, d["metrics"]);
      if (d.contains("gap_ratio")) values[prefix + "/gap_ratio"].push_back(d["gap_ratio"].get<double>());
      if (d.contains("acceptance_rate")) {
        values[prefix + "/acceptance_rate"].push_back(d["acceptance_rate"].get<double>());
      }
    }
    for (const char* run : {"fedavg_cold", "fedavg_warm"}) {
      if (!r.contains(run)) continue;
      const std::string prefix = std::string(run);
      add_metrics(prefix + "/final", r[run]["rounds"].back());
      values[prefix + "/final/floats_cum"].push_back(r[run]["rounds"].back()["floats_cum"].get<double>());
      if (r[run]["floats_to_threshold"].is_null()) {
        ++not_reached[prefix + "/floats_to_threshold"];
        values[prefix + "/floats_to_threshold"];
      } else {
        values[prefix + "/floats_to_threshold"].push_back(r[run]["floats_to_threshold"].get<double>());
      }
    }
  }
  std::string s = "metric,mean,std,count,not_reached\n";
  for (const auto& [name, v] : values) {
    double mean = 0.0, sd = 0.0;
    for (double x : v) mean += x;
    if (!v.empty()) mean /= static_cast<double>(v.size());
    for (double x : v) sd += (x - mean) * (x - mean);
    sd = v.size() > 1 ? std::sqrt(sd / static_cast<double>(v.size() - 1)) : 0.0;
    const std::string mean_s = v.empty() ? "" : format_real(mean);
    const std::string sd_s = v.empty() ? "" : format_real(sd);
    const auto nr = not_reached.find(name);
    s += name + "," + mean_s + "," + sd_s + "," + std::to_string(v.size()) + "," +
         std::to_string(nr == not_reached.end() ? 0 : nr->second) + "\n";
  }
  return s;
}

std::string render_report(const fs::path& out) {
  std::string s = "method,seed,round,floats_cum,nll,accuracy,ece,rmse\n";
  auto opt = [](const std::optional<double>& v) { return v ? format_real(*v) : std::string(); };
  auto line = [&](const std::string& method, std::uint64_t seed, int round, const MetricsRecord& m) {
    s += method + "," + std::to_string(seed) + "," + std::to_string(round) + "," + std::to_string(m.floats_cum) + "," +
         format_real(m.nll) + "," + opt(m.accuracy) + "," + opt(m.ece) + "," + opt(m.rmse) + "\n";
  };
  const std::vector<std::uint64_t> seeds = seed_dirs_in(out);
  for (std::uint64_t seed : seeds) {
    const fs::path dir = seed_dir(out, seed);
    if (fs::exists(dir / "downstream.json")) {
      for (const json& d : json::parse(read_text(dir / "downstream.json"))) {
        const json& m = d["metrics"];
        MetricsRecord rec;
        rec.nll = m["nll"].get<double>();
        rec.floats_cum = m["floats_cum"].get<long long>();
        if (m.contains("accuracy")) rec.accuracy = m["accuracy"].get<double>();
        if (m.contains("ece")) rec.ece = m["ece"].get<double>();
        if (m.contains("rmse")) rec.rmse = m["rmse"].get<double>();
        line("bpc-fl/" + d["method"].get<std::string>(), seed, 0, rec);
      }
    }
    for (const char* run : {"fedavg_cold", "fedavg_warm"}) {
      const fs::path trace = dir / ("trace_" + std::string(run) + ".csv");
      if (!fs::exists(trace)) continue;
      for (const TraceRow& row : parse_trace_csv(read_text(trace))) line(run, seed, row.round, row.metrics);
    }
  }
  return s;
}

}  // namespace bpcfl
