#include <doctest.h>

#include <set>

#include "flsim/engine.hpp"
#include "flsim/errors.hpp"
#include "flsim/harness.hpp"
#include "test_support.hpp"

using namespace flsim;
using namespace flsim::testing;

namespace {

RunConfig small_config(Method m, std::size_t n, std::size_t mm, std::size_t rounds) {
  RunConfig cfg;
  cfg.method = m;
  cfg.n_clients = n;
  cfg.sample_size = mm;
  cfg.rounds = rounds;
  cfg.local_epochs = 1;
  cfg.batch_size = 8;
  cfg.client_lr = 0.05;
  cfg.seed = 17;
  cfg.partition = PartitionSpec::iid();
  cfg.model = mlp_spec(5, 6, 4);
  return cfg;
}

TrainTestSplit small_data(std::uint64_t seed = 1) {
  DataSpec spec;
  spec.num_classes = 4;
  spec.dim = 5;
  spec.per_class = 30;
  spec.spread = 0.8;
  spec.test_fraction = 0.2;
  return make_dataset(spec, seed);
}

}  // namespace

TEST_CASE("sample_clients") {
  Stream rng(1);
  SUBCASE("exhaustive") {
    const auto ids = sample_clients(10, 10, rng);
    CHECK(ids == std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
  }
  SUBCASE("10 of 100, unique, sorted, in range") {
    const auto ids = sample_clients(100, 10, rng);
    CHECK(ids.size() == 10);
    CHECK(std::set<std::size_t>(ids.begin(), ids.end()).size() == 10);
    CHECK(std::is_sorted(ids.begin(), ids.end()));
    CHECK(ids.back() < 100);
  }
  SUBCASE("deterministic per (seed, round)") {
    auto a = derive_stream(3, 4, channel::kServer);
    auto b = derive_stream(3, 4, channel::kServer);
    CHECK(sample_clients(100, 10, a) == sample_clients(100, 10, b));
  }
  SUBCASE("M > N") { CHECK_THROWS_AS(sample_clients(3, 4, rng), ConfigError); }
}

TEST_CASE("zero learning rate is a fixed point for every method") {
  const auto data = small_data();
  for (Method m : kAllMethods) {
    CAPTURE(to_string(m));
    auto cfg = small_config(m, 6, 3, 1);
    cfg.client_lr = 0.0;
    const auto method = make_method(m);
    auto server = init_server(cfg, *method);
    auto states = init_clients(cfg, *method, server.global.layout());
    const auto plan = build_plan(cfg, data.train);
    const ParamVector before = server.global;
    for (int r = 0; r < 3; ++r) {
      const auto metrics = run_round(server, states, plan, data.train, cfg, *method);
      CHECK(metrics.update_norm == 0.0);
    }
    CHECK(server.global == before);
    CHECK(server.round == 3);
  }
}

TEST_CASE("one client sampled from one: identical to centralized minibatch SGD") {
  const auto data = small_data(2);
  auto cfg = small_config(Method::fedavg, 1, 1, 12);
  cfg.local_epochs = 2;
  cfg.batch_size = 7;
  const auto result = run_training(cfg, data.train, data.test);

  Stream init = derive_stream(cfg.seed, channel::kSetupRound, channel::kInit);
  ParamVector theta = init_params(cfg.model, init);
  for (std::size_t r = 0; r < cfg.rounds; ++r) {
    Stream rng = derive_stream(cfg.seed, static_cast<std::int64_t>(r), 0);
    std::vector<std::size_t> order(data.train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t e = 0; e < cfg.local_epochs; ++e) {
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
        const std::size_t end = std::min(order.size(), b + cfg.batch_size);
        const auto batch = data.train.gather(std::span(order).subspan(b, end - b));
        theta.axpy(-cfg.client_lr, loss_and_grad(cfg.model, theta, batch).grad);
      }
    }
  }
  CHECK(result.server.global == theta);
}

TEST_CASE("two clients returning (0,2) and (4,6) average to (2,4)") {
  const auto layout = probe_spec({0, 0}).layout();
  std::vector<ClientResult> results(2);
  results[0].final_params = ParamVector(layout, {0, 2});
  results[1].client_id = 1;
  results[1].final_params = ParamVector(layout, {4, 6});
  ServerState server{0, ParamVector(layout), {}, {}, {}};
  HyperParams hp;
  make_method(Method::fedavg)->server_update(results, server, AggregationContext{2, 0.1, hp, false});
  CHECK(server.global == ParamVector(layout, {2, 4}));
}

TEST_CASE("run_round changes only the sampled clients' states") {
  const auto data = small_data();
  for (Method m : {Method::feddyn, Method::fedgamma, Method::fedspeed, Method::fedsmoo}) {
    CAPTURE(to_string(m));
    const auto cfg = small_config(m, 8, 3, 1);
    const auto method = make_method(m);
    auto server = init_server(cfg, *method);
    auto states = init_clients(cfg, *method, server.global.layout());
    const auto before = states;
    const auto plan = build_plan(cfg, data.train);
    const auto metrics = run_round(server, states, plan, data.train, cfg, *method);
    const std::set<std::size_t> sampled(metrics.sampled.begin(), metrics.sampled.end());
    for (std::size_t c = 0; c < cfg.n_clients; ++c) {
      CHECK((states[c] != before[c]) == (sampled.count(c) == 1));
    }
  }
}

TEST_CASE("metrics records") {
  const auto data = small_data();
  auto cfg = small_config(Method::fedsam, 6, 2, 5);
  cfg.eval_every = 2;
  std::vector<std::size_t> seen;
  const auto result = run_training(cfg, data.train, data.test,
                                   [&](const RoundMetrics& m) { seen.push_back(m.round); });
  REQUIRE(result.metrics.size() == 5);
  CHECK(seen == std::vector<std::size_t>{0, 1, 2, 3, 4});
  for (const auto& m : result.metrics) {
    CHECK(m.sampled.size() == 2);
    CHECK(m.grad_evals > 0);
    CHECK(m.update_norm > 0.0);
    const bool evaluated = (m.round + 1) % 2 == 0 || m.round == 4;
    CHECK(m.test_top1.has_value() == evaluated);
  }
  CHECK(result.server.round == 5);
}

TEST_CASE("R=1 equals a single run_round after setup") {
  const auto data = small_data();
  const auto cfg = small_config(Method::fedprox, 5, 2, 1);
  const auto trained = run_training(cfg, data.train, data.test);
  const auto method = make_method(cfg.method);
  auto server = init_server(cfg, *method);
  auto states = init_clients(cfg, *method, server.global.layout());
  const auto m = run_round(server, states, build_plan(cfg, data.train), data.train, cfg, *method,
                           &data.test);
  CHECK(server == trained.server);
  CHECK(states == trained.clients);
  CHECK(format_metrics_row({m.round, m.sampled, m.mean_train_loss, m.test_top1, 0.0,
                            m.update_norm, m.grad_evals}) ==
        format_metrics_row({trained.metrics[0].round, trained.metrics[0].sampled,
                            trained.metrics[0].mean_train_loss, trained.metrics[0].test_top1, 0.0,
                            trained.metrics[0].update_norm, trained.metrics[0].grad_evals}));
}

TEST_CASE("results do not depend on the worker count") {
  const auto data = small_data();
  for (Method m : kAllMethods) {
    CAPTURE(to_string(m));
    auto cfg = small_config(m, 8, 4, 4);
    cfg.partition = PartitionSpec::dirichlet(0.3);
    const auto one = run_training(cfg, data.train, data.test);
    cfg.workers = 4;
    const auto four = run_training(cfg, data.train, data.test);
    CHECK(one.server == four.server);
    CHECK(one.clients == four.clients);
    for (std::size_t r = 0; r < one.metrics.size(); ++r) {
      CHECK(one.metrics[r].mean_train_loss == four.metrics[r].mean_train_loss);
      CHECK(one.metrics[r].test_top1 == four.metrics[r].test_top1);
    }
  }
}

TEST_CASE("identical shards make every participant return the same model") {
  // Each client holds a copy of one sample; the per-client streams differ
  // but a single-sample shuffle is the identity, so all results coincide.
  LabeledDataset data;
  data.num_classes = 2;
  data.features = Matrix(4, 2);
  for (std::size_t r = 0; r < 4; ++r) {
    data.features(r, 0) = 1.0;
    data.features(r, 1) = -0.5;
  }
  data.labels = {1, 1, 1, 1};
  auto cfg = small_config(Method::fedavg, 4, 4, 1);
  cfg.model = linear_spec(2, 2);
  cfg.batch_size = 1;
  PartitionPlan plan;
  plan.assignments = {{0}, {1}, {2}, {3}};
  const auto method = make_method(cfg.method);
  auto server = init_server(cfg, *method);
  auto states = init_clients(cfg, *method, server.global.layout());
  ServerState single = server;
  run_round(server, states, plan, data, cfg, *method);

  auto cfg1 = cfg;
  cfg1.n_clients = cfg1.sample_size = 1;
  PartitionPlan plan1;
  plan1.assignments = {{0}};
  auto states1 = init_clients(cfg1, *method, single.global.layout());
  run_round(single, states1, plan1, data, cfg1, *method);
  CHECK(server.global == single.global);
}

TEST_CASE("divergence carries the method, round and completed prefix") {
  const auto data = small_data();
  auto cfg = small_config(Method::fedavg, 4, 4, 50);
  cfg.client_lr = 1e306;
  try {
    run_training(cfg, data.train, data.test);
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(e.method() == Method::fedavg);
    CHECK(e.completed().size() == e.round());
  }
}

TEST_CASE("run_round rejects mismatched state") {
  const auto data = small_data();
  const auto cfg = small_config(Method::fedavg, 4, 2, 1);
  const auto method = make_method(cfg.method);
  auto server = init_server(cfg, *method);
  std::vector<ClientState> states(3);
  CHECK_THROWS_AS(run_round(server, states, build_plan(cfg, data.train), data.train, cfg, *method),
                  ConfigError);
}
