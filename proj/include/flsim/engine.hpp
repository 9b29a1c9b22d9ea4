#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "flsim/algorithms.hpp"
#include "flsim/config.hpp"
#include "flsim/data.hpp"
#include "flsim/rng.hpp"

namespace flsim {

struct RoundMetrics {
  std::size_t round = 0;
  std::vector<std::size_t> sampled;
  double mean_train_loss = 0.0;
  /// Accuracy of theta_{r+1} on the test set, on evaluation rounds only.
  std::optional<double> test_top1;
  double wall_time_seconds = 0.0;
  /// |theta_{r+1} - theta_r|_2
  double update_norm = 0.0;
  std::uint64_t grad_evals = 0;
};

/// Non-finite loss, gradient or parameters. Carries the metrics of every
/// round completed before the failure.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(Method method, std::size_t round, const std::string& detail)
      : std::runtime_error(std::string(to_string(method)) + " diverged at round " +
                           std::to_string(round) + ": " + detail),
        method_(method),
        round_(round) {}

  Method method() const noexcept { return method_; }
  std::size_t round() const noexcept { return round_; }
  const std::vector<RoundMetrics>& completed() const noexcept { return completed_; }
  void set_completed(std::vector<RoundMetrics> metrics) { completed_ = std::move(metrics); }

 private:
  Method method_;
  std::size_t round_;
  std::vector<RoundMetrics> completed_;
};

/// Uniform sample of m distinct ids from [0, n), ascending.
std::vector<std::size_t> sample_clients(std::size_t n, std::size_t m, Stream& rng);

/// Server state for round 0 with theta_0 drawn from the seed's init channel.
ServerState init_server(const RunConfig& cfg, const FederatedMethod& method);
std::vector<ClientState> init_clients(const RunConfig& cfg, const FederatedMethod& method,
                                      const LayoutPtr& layout);

/// Partition named by cfg.partition, drawn from the seed's partition channel.
PartitionPlan build_plan(const RunConfig& cfg, const LabeledDataset& train);

/// One communication round. Samples clients from (seed, round, server),
/// runs their local updates (cfg.workers at a time, each with stream
/// (seed, round, client)), aggregates in ascending client id and advances
/// server.round. Only sampled clients' states change. Test accuracy is
/// filled when `test` is given.
RoundMetrics run_round(ServerState& server, std::vector<ClientState>& states,
                       const PartitionPlan& plan, const LabeledDataset& train,
                       const RunConfig& cfg, const FederatedMethod& method,
                       const LabeledDataset* test = nullptr);

struct TrainingResult {
  std::vector<RoundMetrics> metrics;
  ServerState server;
  std::vector<ClientState> clients;
};

using RoundObserver = std::function<void(const RoundMetrics&)>;

/// Full run: init, partition, cfg.rounds rounds, evaluation every
/// cfg.eval_every rounds and on the last one. `on_round` sees each record
/// as soon as it is complete.
TrainingResult run_training(const RunConfig& cfg, const LabeledDataset& train,
                            const LabeledDataset& test, const RoundObserver& on_round = {});

}  // namespace flsim
