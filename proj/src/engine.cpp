#include "flsim/engine.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>

#include <fmt/format.h>

#include "flsim/errors.hpp"
#include "parallel.hpp"

namespace flsim {
namespace {

std::string nonfinite_server_field(const ServerState& server) {
  if (!server.global.all_finite()) return "global model block '" + server.global.first_nonfinite_block() + "'";
  if (server.momentum && !server.momentum->all_finite()) return "momentum";
  if (server.global_control && !server.global_control->all_finite()) return "global control";
  if (server.global_perturb && !server.global_perturb->all_finite()) return "global perturbation";
  return {};
}

}  // namespace

std::vector<std::size_t> sample_clients(std::size_t n, std::size_t m, Stream& rng) {
  if (m < 1 || m > n) {
    throw ConfigError(fmt::format("cannot sample {} clients out of {}", m, n));
  }
  std::vector<std::size_t> ids(n);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  for (std::size_t i = 0; i < m; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(ids[i], ids[pick(rng)]);
  }
  ids.resize(m);
  std::sort(ids.begin(), ids.end());
  return ids;
}

ServerState init_server(const RunConfig& cfg, const FederatedMethod& method) {
  Stream rng = derive_stream(cfg.seed, channel::kSetupRound, channel::kInit);
  ServerState server;
  server.global = init_params(cfg.model, rng);
  method.init_server_state(server);
  return server;
}

std::vector<ClientState> init_clients(const RunConfig& cfg, const FederatedMethod& method,
                                      const LayoutPtr& layout) {
  std::vector<ClientState> states;
  states.reserve(cfg.n_clients);
  for (std::size_t id = 0; id < cfg.n_clients; ++id) {
    states.push_back(ClientState{id, method.init_client_payload(layout)});
  }
  return states;
}

PartitionPlan build_plan(const RunConfig& cfg, const LabeledDataset& train) {
  Stream rng = derive_stream(cfg.seed, channel::kSetupRound, channel::kPartition);
  if (cfg.partition.kind == PartitionSpec::Kind::iid) return partition_iid(train, cfg.n_clients, rng);
  return partition_dirichlet(train, cfg.n_clients, cfg.partition.alpha, rng);
}

RoundMetrics run_round(ServerState& server, std::vector<ClientState>& states,
                       const PartitionPlan& plan, const LabeledDataset& train,
                       const RunConfig& cfg, const FederatedMethod& method,
                       const LabeledDataset* test) {
  if (states.size() != cfg.n_clients || plan.n_clients() != cfg.n_clients) {
    throw ConfigError("client state / partition size does not match n_clients");
  }
  const auto started = std::chrono::steady_clock::now();
  const std::size_t round = server.round;

  RoundMetrics metrics;
  metrics.round = round;
  {
    Stream rng = derive_stream(cfg.seed, static_cast<std::int64_t>(round), channel::kServer);
    metrics.sampled = sample_clients(cfg.n_clients, cfg.sample_size, rng);
  }

  std::vector<ClientResult> results(metrics.sampled.size());
  try {
    detail::parallel_for(metrics.sampled.size(), cfg.workers, [&](std::size_t slot) {
      const std::size_t id = metrics.sampled[slot];
      const LocalTask task{cfg.model,      train,     plan.assignments[id], server,
                           cfg.hparams,    cfg.client_lr, cfg.epochs_for(id), cfg.batch_size};
      Stream rng = derive_stream(cfg.seed, static_cast<std::int64_t>(round),
                                 static_cast<std::int64_t>(id));
      results[slot] = method.client_update(task, states[id], rng);
    });
  } catch (const NumericalError& e) {
    throw DivergenceError(method.id(), round, e.what());
  }

  const ParamVector previous = server.global;
  method.server_update(results, server,
                       AggregationContext{cfg.n_clients, cfg.client_lr, cfg.hparams,
                                          cfg.weighted_aggregation});
  if (const auto bad = nonfinite_server_field(server); !bad.empty()) {
    throw DivergenceError(method.id(), round, "non-finite " + bad + " after aggregation");
  }
  ++server.round;

  double loss = 0.0;
  for (const auto& r : results) {
    loss += r.mean_loss;
    metrics.grad_evals += r.grad_evals;
  }
  metrics.mean_train_loss = loss / static_cast<double>(results.size());
  metrics.update_norm = (server.global - previous).norm();
  if (test != nullptr) metrics.test_top1 = top1_accuracy(cfg.model, server.global, test->as_batch());
  metrics.wall_time_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return metrics;
}

TrainingResult run_training(const RunConfig& cfg, const LabeledDataset& train,
                            const LabeledDataset& test, const RoundObserver& on_round) {
  cfg.validate();
  const auto method = make_method(cfg.method);
  TrainingResult out;
  out.server = init_server(cfg, *method);
  out.clients = init_clients(cfg, *method, out.server.global.layout());
  const PartitionPlan plan = build_plan(cfg, train);
  const bool can_evaluate = cfg.model.kind != ModelKind::quadratic_probe && test.size() > 0;

  for (std::size_t r = 0; r < cfg.rounds; ++r) {
    const bool evaluate = can_evaluate && ((r + 1) % cfg.eval_every == 0 || r + 1 == cfg.rounds);
    try {
      out.metrics.push_back(
          run_round(out.server, out.clients, plan, train, cfg, *method, evaluate ? &test : nullptr));
    } catch (DivergenceError& e) {
      e.set_completed(out.metrics);
      throw;
    }
    if (on_round) on_round(out.metrics.back());
  }
  return out;
}

}  // namespace flsim
