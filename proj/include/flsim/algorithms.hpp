#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "flsim/config.hpp"
#include "flsim/data.hpp"
#include "flsim/model.hpp"
#include "flsim/params.hpp"
#include "flsim/rng.hpp"

namespace flsim {

/// Global model plus the server-side fields of methods with a non-vanilla
/// ServerOpt. A field is engaged only for the method that owns it.
struct ServerState {
  std::size_t round = 0;
  ParamVector global;
  std::optional<ParamVector> momentum;        // fedcm
  std::optional<ParamVector> global_control;  // fedgamma
  std::optional<ParamVector> global_perturb;  // fedsmoo

  bool operator==(const ServerState&) const = default;
};

struct FedDynState {
  ParamVector h;
  bool operator==(const FedDynState&) const = default;
};
struct FedGammaState {
  ParamVector control;
  bool operator==(const FedGammaState&) const = default;
};
struct FedSpeedState {
  ParamVector dual;
  bool operator==(const FedSpeedState&) const = default;
};
struct FedSmooState {
  ParamVector h;
  ParamVector u;
  bool operator==(const FedSmooState&) const = default;
};

using ClientPayload =
    std::variant<std::monostate, FedDynState, FedGammaState, FedSpeedState, FedSmooState>;

struct ClientState {
  std::size_t client_id = 0;
  ClientPayload payload;

  bool operator==(const ClientState&) const = default;
};

struct ClientResult {
  std::size_t client_id = 0;
  ParamVector final_params;
  /// Local steps taken: epochs * ceil(shard / batch).
  std::size_t steps = 0;
  /// fedgamma: change of the client control variate. fedsmoo: last corrected
  /// perturbation. Empty otherwise.
  std::optional<ParamVector> aux;
  double mean_loss = 0.0;
  std::uint64_t grad_evals = 0;
  /// Largest L2 norm of any perturbation applied during local training.
  double max_perturbation_norm = 0.0;
  std::size_t shard_size = 0;
};

/// Everything one client needs for its local update. The server state is a
/// read-only snapshot of round r.
struct LocalTask {
  const ModelSpec& model;
  const LabeledDataset& data;
  std::span<const std::size_t> shard;
  const ServerState& server;
  const HyperParams& hparams;
  double lr = 0.0;
  std::size_t epochs = 1;
  std::size_t batch_size = 1;
};

struct AggregationContext {
  std::size_t n_clients = 1;
  double lr = 0.0;
  const HyperParams& hparams;
  bool weighted = false;
};

/// ClientOpt/ServerOpt pair. Each local update runs `epochs` passes over the
/// shard, reshuffling it from the client stream before each pass, with
/// steps theta <- theta - lr * d where d is the method's direction.
class FederatedMethod {
 public:
  virtual ~FederatedMethod() = default;

  virtual Method id() const = 0;
  virtual ClientPayload init_client_payload(const LayoutPtr& layout) const;
  virtual void init_server_state(ServerState& server) const;

  /// Reads and writes only `state`; throws NumericalError on a non-finite
  /// step direction.
  virtual ClientResult client_update(const LocalTask& task, ClientState& state,
                                     Stream& rng) const = 0;

  /// Folds `results` in ascending client id regardless of input order and
  /// writes theta_{r+1} plus any server-side field. Does not touch `round`.
  virtual void server_update(std::span<const ClientResult> results, ServerState& server,
                             const AggregationContext& ctx) const;
};

std::unique_ptr<FederatedMethod> make_method(Method m);

/// Plain (or shard-size weighted) mean of the results' final parameters,
/// summed in ascending client id.
ParamVector aggregate_mean(std::span<const ClientResult> results, bool weighted);

}  // namespace flsim
