#include <doctest.h>

#include <algorithm>
#include <set>

#include "bpcfl/federation.hpp"
#include "support.hpp"

using namespace testing;

namespace {

std::vector<DatasetShard> random_shards(Gen& g, int m, const std::vector<int>& sizes, int d, int c, bool cls) {
  std::vector<DatasetShard> out;
  for (int i = 0; i < m; ++i) {
    DatasetShard s;
    s.client_id = i;
    s.inputs = g.matrix(sizes[i], d);
    s.targets = cls ? g.one_hot(sizes[i], c) : g.matrix(sizes[i], c);
    out.push_back(s);
  }
  return out;
}

BpcFklConfig cheap_cfg(int k) {
  BpcFklConfig c;
  c.coreset_size = k;
  c.num_updates = 2;
  c.coreset_chain_length = 2;
  c.data_chain_length = 5;
  c.num_noise_samples = 1;
  c.batch_trajectories = 1;
  c.pretrain.num_trajectories = 2;
  c.pretrain.num_steps = 10;
  c.pretrain.save_interval = 5;
  return c;
}

Pseudocoreset random_coreset(Gen& g, int k, int d, int c, int owner) {
  Pseudocoreset cs;
  cs.z = g.matrix(k, d);
  cs.y_hat = g.matrix(k, c);
  cs.owner = owner;
  return cs;
}

}  // namespace

TEST_CASE("BPC-FL up-link cost is K*(D+C) floats per client in one event each") {
  Gen g(1);
  const MlpArchitecture a{{1, 4, 1}, Activation::swish, std::nullopt, Task::regression};
  const auto shards = random_shards(g, 5, {10, 10, 10, 10, 10}, 1, 1, false);
  const BpcFlResult r = run_bpc_fl(shards, a, PriorSpec{1.0}, LikelihoodSpec::gaussian(0.3), cheap_cfg(6), {});
  CHECK(comm_totals(r.ledger, kMethodBpcFl) == 60);
  CHECK(comm_totals_ints(r.ledger, kMethodBpcFl) == 0);
  CHECK(r.ledger.events().size() == 5);
  std::set<int> clients;
  for (const CommEvent& e : r.ledger.events()) {
    CHECK(e.direction == Direction::up);
    CHECK(e.round == 0);
    CHECK(e.float32_count == 12);
    clients.insert(e.client_id);
  }
  CHECK(clients.size() == 5);
  for (const WeightedCoreset& wc : r.server.entries) CHECK(wc.weight == 1.0);
  CHECK(r.server.total_data_size == 50);
}

TEST_CASE("frozen one-hot labels are counted as integers") {
  Gen g(2);
  const MlpArchitecture a{{2, 4, 2}, Activation::relu, GroupNormSpec{2, 1e-5}, Task::classification};
  BpcFklConfig c = cheap_cfg(5);
  c.step_size_y = 0.0;
  const auto shards = random_shards(g, 3, {8, 8, 8}, 2, 2, true);
  const BpcFlResult r = run_bpc_fl(shards, a, PriorSpec{0.1}, LikelihoodSpec::categorical(), c, {});
  CHECK(r.ledger.total_floats() == 3 * 5 * 2);
  CHECK(r.ledger.total_ints() == 3 * 5);
}

TEST_CASE("client runs are independent of thread count") {
  Gen g(3);
  const MlpArchitecture a{{1, 4, 1}, Activation::swish, std::nullopt, Task::regression};
  const auto shards = random_shards(g, 4, {6, 9, 7, 8}, 1, 1, false);
  BpcFlOptions one, many;
  one.master_seed = many.master_seed = 5;
  many.max_threads = 3;
  const auto lik = LikelihoodSpec::gaussian(0.3);
  const BpcFlResult r1 = run_bpc_fl(shards, a, PriorSpec{1.0}, lik, cheap_cfg(2), one);
  const BpcFlResult r2 = run_bpc_fl(shards, a, PriorSpec{1.0}, lik, cheap_cfg(2), many);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK((r1.server.entries[i].coreset.z.array() == r2.server.entries[i].coreset.z.array()).all());
    CHECK(r1.server.entries[i].weight == r2.server.entries[i].weight);
  }
}

TEST_CASE("client failures carry the client id") {
  Gen g(4);
  const MlpArchitecture a{{1, 4, 1}, Activation::swish, std::nullopt, Task::regression};
  auto shards = random_shards(g, 2, {5, 5}, 1, 1, false);
  shards[1].client_id = 42;
  shards[1].inputs.resize(0, 1);
  shards[1].targets.resize(0, 1);
  try {
    run_bpc_fl(shards, a, PriorSpec{1.0}, LikelihoodSpec::gaussian(0.3), cheap_cfg(2), {});
    FAIL("expected failure");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find("client 42") != std::string::npos);
  }
}

TEST_CASE("server weights are M*n_m/N") {
  Gen g(5);
  std::vector<Pseudocoreset> cs;
  for (int i = 0; i < 3; ++i) cs.push_back(random_coreset(g, 2, 1, 1, i));
  const ServerCoreset sc = aggregate_coresets(cs, {10, 20, 30});
  CHECK(sc.num_clients == 3);
  CHECK(sc.total_data_size == 60);
  CHECK(sc.entries[0].weight == doctest::Approx(0.5));
  CHECK(sc.entries[1].weight == doctest::Approx(1.0));
  CHECK(sc.entries[2].weight == doctest::Approx(1.5));
  const ServerCoreset single = aggregate_coresets({cs[0]}, {17});
  CHECK(single.entries.size() == 1);
  CHECK(single.entries[0].weight == 1.0);
  CHECK((single.entries[0].coreset.z.array() == cs[0].z.array()).all());
}

TEST_CASE("server target properties") {
  Gen g(6);
  const MlpArchitecture a{{1, 5, 1}, Activation::swish, std::nullopt, Task::regression};
  const PriorSpec prior{0.5};
  const LikelihoodSpec lik = LikelihoodSpec::gaussian(0.3);
  const Pseudocoreset c0 = random_coreset(g, 3, 1, 1, 0);
  ServerCoreset twice = aggregate_coresets({c0, c0}, {5, 5});
  ServerCoreset once = aggregate_coresets({c0}, {5});
  once.entries[0].weight = 2.0;
  ServerCoreset empty;
  for (int trial = 0; trial < 10; ++trial) {
    const ParamVector p = init_params(a, trial);
    const double lt = log_unnorm(server_target(twice, a, prior, lik), p);
    CHECK(lt == doctest::Approx(log_unnorm(server_target(once, a, prior, lik), p)).epsilon(1e-13));
    CHECK(log_unnorm(server_target(empty, a, prior, lik), p) == -0.25 * p.squaredNorm());
  }

  std::vector<Pseudocoreset> cs;
  for (int i = 0; i < 4; ++i) cs.push_back(random_coreset(g, 2, 1, 1, i));
  const ServerCoreset base = aggregate_coresets(cs, {3, 4, 5, 6});
  ServerCoreset scaled = base;
  for (WeightedCoreset& wc : scaled.entries) wc.weight *= 3.0;
  ServerCoreset permuted = base;
  std::reverse(permuted.entries.begin(), permuted.entries.end());
  ServerCoreset empty_sc;
  for (int trial = 0; trial < 10; ++trial) {
    const ParamVector p = init_params(a, 50 + trial);
    const double prior_part = log_unnorm(server_target(empty_sc, a, prior, lik), p);
    const double data = log_unnorm(server_target(base, a, prior, lik), p) - prior_part;
    const double data3 = log_unnorm(server_target(scaled, a, prior, lik), p) - prior_part;
    CHECK(data3 == doctest::Approx(3.0 * data).epsilon(1e-12));
    CHECK(log_unnorm(server_target(permuted, a, prior, lik), p) ==
          doctest::Approx(log_unnorm(server_target(base, a, prior, lik), p)).epsilon(1e-13));
  }
}

TEST_CASE("FedAvg with one client and one local SGD step is gradient descent") {
  Gen g(7);
  const MlpArchitecture a{{2, 6, 1}, Activation::swish, std::nullopt, Task::regression};
  const auto shards = random_shards(g, 1, {15}, 2, 1, false);
  FedAvgConfig cfg;
  cfg.rounds = 100;
  cfg.clients_per_round = 1;
  cfg.local_steps = 1;
  cfg.client = {SgdSpec{0.0}, 1e-3, 0};
  cfg.server = {SgdSpec{0.0}, 1.0, 0};
  cfg.l2_precision = 0.1;
  cfg.seed = 3;
  const LikelihoodSpec lik = LikelihoodSpec::gaussian(0.3);
  const FedAvgResult r = run_fedavg(shards, a, lik, cfg);
  const TargetDensity central{a, PriorSpec{0.1}, {{shards[0].inputs, shards[0].targets, lik, 1.0}}};
  ParamVector theta = init_params(a, 3);
  double worst = 0.0;
  for (int round = 1; round <= 100; ++round) {
    theta += 1e-3 * grad_log_unnorm(central, theta);
    worst = std::max(worst, (r.params[round] - theta).cwiseAbs().maxCoeff());
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("FedAvg ledger counts 2*P per participating client per round") {
  Gen g(8);
  const MlpArchitecture a{{1, 3, 1}, Activation::swish, std::nullopt, Task::regression};
  REQUIRE(param_count(a) == 10);
  const auto shards = random_shards(g, 4, {5, 6, 7, 8}, 1, 1, false);
  FedAvgConfig cfg;
  cfg.rounds = 3;
  cfg.clients_per_round = 2;
  cfg.local_steps = 2;
  const FedAvgResult r = run_fedavg(shards, a, LikelihoodSpec::gaussian(0.3), cfg);
  CHECK(comm_totals(r.ledger, kMethodFedAvg) == 120);
  CHECK(r.ledger.total_floats() == 120);
  REQUIRE(r.floats_cum.size() == 4);
  for (int round = 0; round <= 3; ++round) CHECK(r.floats_cum[round] == 40 * round);
  for (int round = 1; round <= 3; ++round) {
    std::set<int> clients;
    for (const CommEvent& e : r.ledger.events()) {
      if (e.round == round) clients.insert(e.client_id);
    }
    CHECK(clients.size() == 2);
  }
  CHECK(comm_totals(CommLedger{}, kMethodFedAvg) == 0);
  cfg.clients_per_round = 5;
  CHECK_THROWS_AS(run_fedavg(shards, a, LikelihoodSpec::gaussian(0.3), cfg), InvalidArgument);
}

TEST_CASE("FedAvg with zero rounds returns the warm start and its cost") {
  Gen g(9);
  const MlpArchitecture a{{1, 3, 1}, Activation::swish, std::nullopt, Task::regression};
  const auto shards = random_shards(g, 2, {5, 5}, 1, 1, false);
  FedAvgConfig cfg;
  cfg.rounds = 0;
  cfg.clients_per_round = 2;
  cfg.init = g.matrix(10, 1);
  cfg.init_ledger.record({0, Direction::up, 0, 12, 0, kMethodBpcFl});
  cfg.init_ledger.record({0, Direction::up, 1, 12, 0, kMethodBpcFl});
  const FedAvgResult r = run_fedavg(shards, a, LikelihoodSpec::gaussian(0.3), cfg);
  REQUIRE(r.params.size() == 1);
  CHECK((r.params[0].array() == cfg.init->array()).all());
  CHECK(r.ledger.total_floats() == 24);
  CHECK(comm_totals(r.ledger, kMethodFedAvg) == 0);
}

TEST_CASE("FedAvg reports divergence with the round") {
  Gen g(10);
  const MlpArchitecture a{{1, 3, 1}, Activation::swish, std::nullopt, Task::regression};
  const auto shards = random_shards(g, 2, {5, 5}, 1, 1, false);
  FedAvgConfig cfg;
  cfg.rounds = 50;
  cfg.clients_per_round = 2;
  cfg.client = {SgdSpec{0.0}, 1e5, 0};
  cfg.server = {SgdSpec{0.0}, 1.0, 0};
  try {
    run_fedavg(shards, a, LikelihoodSpec::gaussian(0.3), cfg);
    FAIL("expected divergence");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("round") != std::string::npos);
  }
}

TEST_CASE("ledger totals equal the sum of events and normalize by round and client") {
  Gen g(11);
  CommLedger l;
  long long sum = 0;
  for (int i = 0; i < 50; ++i) {
    const long long n = g.integer(0, 1000);
    sum += n;
    l.record({g.integer(0, 5), i % 2 ? Direction::up : Direction::down, g.integer(0, 4), n, 0, "x"});
  }
  CHECK(l.total_floats() == sum);
  const auto norm = l.normalized();
  for (std::size_t i = 1; i < norm.size(); ++i) {
    CHECK((norm[i - 1].round < norm[i].round ||
           (norm[i - 1].round == norm[i].round && norm[i - 1].client_id <= norm[i].client_id)));
  }
  CHECK_THROWS_AS(l.record({0, Direction::up, 0, -1, 0, "x"}), InvalidArgument);
}

TEST_CASE("floats_to_reach matches a linear scan") {
  Gen g(12);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<TracePoint> trace;
    long long floats = g.integer(0, 100);
    double metric = g.uniform(0.0, 0.5);
    const int n = g.integer(0, 30);
    for (int r = 0; r < n; ++r) {
      trace.push_back({r, floats, metric});
      floats += g.integer(1, 100);
      metric += g.uniform(0.0, 0.05);
    }
    const double threshold = g.uniform(0.0, 1.2);
    std::optional<long long> scan;
    for (const TracePoint& p : trace) {
      if (p.metric >= threshold) {
        scan = p.floats_cum;
        break;
      }
    }
    CHECK(floats_to_reach(trace, threshold) == scan);
    // lower-is-better on the negated trace gives the same answer
    std::vector<TracePoint> negated = trace;
    for (TracePoint& p : negated) p.metric = -p.metric;
    CHECK(floats_to_reach(negated, -threshold, false) == scan);
  }
  CHECK_FALSE(floats_to_reach({}, 0.5).has_value());
}
