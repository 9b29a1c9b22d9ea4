#include "flsim/algorithms.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "flsim/errors.hpp"

namespace flsim {
namespace {

struct StepStats {
  double loss_sum = 0.0;
  std::uint64_t grad_evals = 0;
  double max_perturbation_norm = 0.0;
};

std::vector<const ClientResult*> by_client_id(std::span<const ClientResult> results) {
  std::vector<const ClientResult*> sorted;
  sorted.reserve(results.size());
  for (const auto& r : results) sorted.push_back(&r);
  std::stable_sort(sorted.begin(), sorted.end(), [](const ClientResult* a, const ClientResult* b) {
    return a->client_id < b->client_id;
  });
  return sorted;
}

LossGrad gradient(const LocalTask& task, const ParamVector& theta, const Batch& batch,
                  StepStats& stats) {
  ++stats.grad_evals;
  return loss_and_grad(task.model, theta, batch);
}

// Gradient at theta + perturbation on the same batch.
ParamVector perturbed_gradient(const LocalTask& task, const ParamVector& theta,
                               const ParamVector& perturbation, const Batch& batch,
                               StepStats& stats) {
  stats.max_perturbation_norm = std::max(stats.max_perturbation_norm, perturbation.norm());
  return gradient(task, theta + perturbation, batch, stats).grad;
}

// rho * v / (|v| + guard)
ParamVector scaled_to_radius(const ParamVector& v, double rho, double guard) {
  return v * (rho / (v.norm() + guard));
}

// Sharpness-aware direction: gradient at theta + rho * g / (|g| + guard).
ParamVector sam_direction(const LocalTask& task, const ParamVector& theta, const Batch& batch,
                          StepStats& stats) {
  const LossGrad first = gradient(task, theta, batch, stats);
  stats.loss_sum += first.loss;
  const ParamVector eps = scaled_to_radius(first.grad, task.hparams.rho, task.hparams.sam_guard);
  return perturbed_gradient(task, theta, eps, batch, stats);
}

// Runs the local epochs and returns a result whose final_params hold the
// last iterate. `direction(theta, batch, stats)` yields d for one step.
template <class Direction>
ClientResult run_local(const LocalTask& task, std::size_t client_id, Stream& rng,
                       Direction&& direction) {
  if (task.shard.empty()) {
    throw ConfigError("client " + std::to_string(client_id) + " has an empty shard");
  }
  if (task.batch_size == 0) throw ConfigError("batch_size must be >= 1");

  ClientResult result;
  result.client_id = client_id;
  result.shard_size = task.shard.size();
  ParamVector theta = task.server.global;
  StepStats stats;
  std::vector<std::size_t> order(task.shard.begin(), task.shard.end());
  for (std::size_t epoch = 0; epoch < task.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t begin = 0; begin < order.size(); begin += task.batch_size) {
      const std::size_t end = std::min(order.size(), begin + task.batch_size);
      const Batch batch =
          task.data.gather(std::span<const std::size_t>(order).subspan(begin, end - begin));
      const ParamVector d = direction(theta, batch, stats);
      const std::string bad = d.first_nonfinite_block();
      if (!bad.empty()) {
        throw NumericalError(bad, "non-finite step direction in block '" + bad + "'");
      }
      theta.axpy(-task.lr, d);
      ++result.steps;
    }
  }
  result.final_params = std::move(theta);
  result.mean_loss = stats.loss_sum / static_cast<double>(result.steps);
  result.grad_evals = stats.grad_evals;
  result.max_perturbation_norm = stats.max_perturbation_norm;
  return result;
}

// Plain gradient direction; records the loss.
ParamVector sgd_direction(const LocalTask& task, const ParamVector& theta, const Batch& batch,
                          StepStats& stats) {
  LossGrad lg = gradient(task, theta, batch, stats);
  stats.loss_sum += lg.loss;
  return std::move(lg.grad);
}

template <class Payload>
Payload& payload_as(ClientState& state, Method m) {
  auto* p = std::get_if<Payload>(&state.payload);
  if (p == nullptr) {
    throw ConfigError("client " + std::to_string(state.client_id) + " state does not match " +
                      std::string(to_string(m)));
  }
  return *p;
}

const ParamVector& engaged(const std::optional<ParamVector>& field, const char* name) {
  if (!field) throw ConfigError(std::string("server state is missing ") + name);
  return *field;
}

class FedAvg final : public FederatedMethod {
 public:
  Method id() const override { return Method::fedavg; }
  ClientResult client_update(const LocalTask& task, ClientState& state, Stream& rng) const override {
    return run_local(task, state.client_id, rng,
                     [&](const ParamVector& theta, const Batch& batch, StepStats& stats) {
                       return sgd_direction(task, theta, batch, stats);
                     });
  }
};

// d = g + lambda (theta - theta_r)
class FedProx final : public FederatedMethod {
 public:
  Method id() const override { return Method::fedprox; }
  ClientResult client_update(const LocalTask& task, ClientState& state, Stream& rng) const override {
    const ParamVector& anchor = task.server.global;
    const double lambda = task.hparams.lambda;
    return run_local(task, state.client_id, rng,
                     [&](const ParamVector& theta, const Batch& batch, StepStats& stats) {
                       ParamVector d = sgd_direction(task, theta, batch, stats);
                       d.axpy(lambda, theta - anchor);
                       return d;
                     });
  }
};

// d = g - h + beta (theta - theta_r); h <- h - beta (theta_final - theta_r)
class FedDyn final : public FederatedMethod {
 public:
  Method id() const override { return Method::feddyn; }
  ClientPayload init_client_payload(const LayoutPtr& layout) const override {
    return FedDynState{ParamVector(layout)};
  }
  ClientResult client_update(const LocalTask& task, ClientState& state, Stream& rng) const override {
    auto& dual = payload_as<FedDynState>(state, id());
    const ParamVector& anchor = task.server.global;
    const double beta = task.hparams.beta;
    ClientResult result =
        run_local(task, state.client_id, rng,
                  [&](const ParamVector& theta, const Batch& batch, StepStats& stats) {
                    ParamVector d = sgd_direction(task, theta, batch, stats);
                    d -= dual.h;
                    d.axpy(beta, theta - anchor);
                    return d;
                  });
    dual.h.axpy(-beta, result.final_params - anchor);
    return result;
  }
};

// d = mu g + (1 - mu) Delta_r. Server: Delta = (theta_r - theta_{r+1}) / (lr * mean steps).
class FedCm final : public FederatedMethod {
 public:
  Method id() const override { return Method::fedcm; }
  void init_server_state(ServerState& server) const override {
    server.momentum = ParamVector(server.global.layout());
  }
  ClientResult client_update(const LocalTask& task, ClientState& state, Stream& rng) const override {
    const ParamVector& momentum = engaged(task.server.momentum, "fedcm momentum");
    const double mu = task.hparams.mu;
    return run_local(task, state.client_id, rng,
                     [&](const ParamVector& theta, const Batch& batch, StepStats& stats) {
                       ParamVector d = sgd_direction(task, theta, batch, stats) * mu;
                       d.axpy(1.0 - mu, momentum);
                       return d;
                     });
  }
  void server_update(std::span<const ClientResult> results, ServerState& server,
                     const AggregationContext& ctx) const override {
    ParamVector next = aggregate_mean(results, ctx.weighted);
    double steps = 0.0;
    for (const auto* r : by_client_id(results)) steps += static_cast<double>(r->steps);
    steps /= static_cast<double>(results.size());
    const double denom = ctx.lr * steps;
    ParamVector delta = server.global - next;
    // A zero learning rate moves nothing; keep the momentum at zero then.
    if (denom > 0.0) {
      for (double& v : delta.values()) v /= denom;
    } else {
      delta = ParamVector(server.global.layout());
    }
    server.momentum = std::move(delta);
    server.global = std::move(next);
  }
};

class FedSam final : public FederatedMethod {
 public:
  Method id() const override { return Method::fedsam; }
  ClientResult client_update(const LocalTask& task, ClientState& state, Stream& rng) const override {
    return run_local(task, state.client_id, rng,
                     [&](const ParamVector& theta, const Batch& batch, StepStats& stats) {
                       return sam_direction(task, theta, batch, stats);
                     });
  }
};

// d = sam - c_m + c. End of round:
//   c_m' = c_m - c + (theta_r - theta_final) / (lr * steps), aux = c_m' - c_m.
// Server: c <- c + (1/N) sum aux.
class FedGamma final : public FederatedMethod {
 public:
  Method id() const override { return Method::fedgamma; }
  ClientPayload init_client_payload(const LayoutPtr& layout) const override {
    return FedGammaState{ParamVector(layout)};
  }
  void init_server_state(ServerState& server) const override {
    server.global_control = ParamVector(server.global.layout());
  }
  ClientResult client_update(const LocalTask& task, ClientState& state, Stream& rng) const override {
    auto& local = payload_as<FedGammaState>(state, id());
    const ParamVector& global_control = engaged(task.server.global_control, "fedgamma control");
    ClientResult result =
        run_local(task, state.client_id, rng,
                  [&](const ParamVector& theta, const Batch& batch, StepStats& stats) {
                    ParamVector d = sam_direction(task, theta, batch, stats);
                    d -= local.control;
                    d += global_control;
                    return d;
                  });
    ParamVector updated = local.control - global_control;
    const double denom = task.lr * static_cast<double>(result.steps);
    if (denom > 0.0) {
      ParamVector drift = task.server.global - result.final_params;
      for (double& v : drift.values()) v /= denom;
      updated += drift;
    }
    result.aux = updated - local.control;
    local.control = std::move(updated);
    return result;
  }
  void server_update(std::span<const ClientResult> results, ServerState& server,
                     const AggregationContext& ctx) const override {
    ParamVector next = aggregate_mean(results, ctx.weighted);
    ParamVector sum(server.global.layout());
    for (const auto* r : by_client_id(results)) sum += engaged(r->aux, "fedgamma aux");
    for (double& v : sum.values()) v /= static_cast<double>(ctx.n_clients);
    *server.global_control += sum;
    server.global = std::move(next);
  }
};

// d = sam - g_hat + gamma (theta - theta_r); g_hat <- g_hat - gamma (theta_final - theta_r)
class FedSpeed final : public FederatedMethod {
 public:
  Method id() const override { return Method::fedspeed; }
  ClientPayload init_client_payload(const LayoutPtr& layout) const override {
    return FedSpeedState{ParamVector(layout)};
  }
  ClientResult client_update(const LocalTask& task, ClientState& state, Stream& rng) const override {
    auto& local = payload_as<FedSpeedState>(state, id());
    const ParamVector& anchor = task.server.global;
    const double gamma = task.hparams.prox_weight;
    ClientResult result =
        run_local(task, state.client_id, rng,
                  [&](const ParamVector& theta, const Batch& batch, StepStats& stats) {
                    ParamVector d = sam_direction(task, theta, batch, stats);
                    d -= local.dual;
                    d.axpy(gamma, theta - anchor);
                    return d;
                  });
    local.dual.axpy(-gamma, result.final_params - anchor);
    return result;
  }
};

// Per step: s_hat = rho (g - u + s) / (|g - u + s| + guard);
//           d = grad(theta + s_hat) - h + beta (theta - theta_r).
// End of round: h <- h - beta (theta_final - theta_r); u <- u + (s_hat_last - s);
// aux = s_hat_last. Server: s = rho * mean(aux) / (|mean(aux)| + guard).
class FedSmoo final : public FederatedMethod {
 public:
  Method id() const override { return Method::fedsmoo; }
  ClientPayload init_client_payload(const LayoutPtr& layout) const override {
    return FedSmooState{ParamVector(layout), ParamVector(layout)};
  }
  void init_server_state(ServerState& server) const override {
    server.global_perturb = ParamVector(server.global.layout());
  }
  ClientResult client_update(const LocalTask& task, ClientState& state, Stream& rng) const override {
    auto& local = payload_as<FedSmooState>(state, id());
    const ParamVector& anchor = task.server.global;
    const ParamVector& global_perturb = engaged(task.server.global_perturb, "fedsmoo perturbation");
    const double beta = task.hparams.beta;
    ParamVector last_perturb(anchor.layout());
    ClientResult result =
        run_local(task, state.client_id, rng,
                  [&](const ParamVector& theta, const Batch& batch, StepStats& stats) {
                    const LossGrad first = gradient(task, theta, batch, stats);
                    stats.loss_sum += first.loss;
                    ParamVector raw = first.grad;
                    raw -= local.u;
                    raw += global_perturb;
                    last_perturb = scaled_to_radius(raw, task.hparams.rho, task.hparams.sam_guard);
                    ParamVector d = perturbed_gradient(task, theta, last_perturb, batch, stats);
                    d -= local.h;
                    d.axpy(beta, theta - anchor);
                    return d;
                  });
    local.h.axpy(-beta, result.final_params - anchor);
    local.u += last_perturb - global_perturb;
    result.aux = std::move(last_perturb);
    return result;
  }
  void server_update(std::span<const ClientResult> results, ServerState& server,
                     const AggregationContext& ctx) const override {
    ParamVector next = aggregate_mean(results, ctx.weighted);
    ParamVector avg(server.global.layout());
    for (const auto* r : by_client_id(results)) avg += engaged(r->aux, "fedsmoo aux");
    for (double& v : avg.values()) v /= static_cast<double>(results.size());
    server.global_perturb = scaled_to_radius(avg, ctx.hparams.rho, ctx.hparams.sam_guard);
    server.global = std::move(next);
  }
};

}  // namespace

ClientPayload FederatedMethod::init_client_payload(const LayoutPtr&) const { return {}; }

void FederatedMethod::init_server_state(ServerState&) const {}

void FederatedMethod::server_update(std::span<const ClientResult> results, ServerState& server,
                                    const AggregationContext& ctx) const {
  server.global = aggregate_mean(results, ctx.weighted);
}

ParamVector aggregate_mean(std::span<const ClientResult> results, bool weighted) {
  if (results.empty()) throw ConfigError("cannot aggregate zero client results");
  std::vector<ParamVector> params;
  std::vector<double> weights;
  params.reserve(results.size());
  for (const auto* r : by_client_id(results)) {
    params.push_back(r->final_params);
    weights.push_back(static_cast<double>(r->shard_size));
  }
  return weighted ? weighted_mean(params, weights) : mean(params);
}

std::unique_ptr<FederatedMethod> make_method(Method m) {
  switch (m) {
    case Method::fedavg: return std::make_unique<FedAvg>();
    case Method::fedprox: return std::make_unique<FedProx>();
    case Method::feddyn: return std::make_unique<FedDyn>();
    case Method::fedcm: return std::make_unique<FedCm>();
    case Method::fedsam: return std::make_unique<FedSam>();
    case Method::fedgamma: return std::make_unique<FedGamma>();
    case Method::fedspeed: return std::make_unique<FedSpeed>();
    case Method::fedsmoo: return std::make_unique<FedSmoo>();
  }
  throw ConfigError("unknown method");
}

}  // namespace flsim
