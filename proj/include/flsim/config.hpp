#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>

#include "flsim/model.hpp"

namespace flsim {

/// Declaration order is the reporting order used by sweep tables.
enum class Method { fedavg, fedprox, feddyn, fedcm, fedsam, fedgamma, fedspeed, fedsmoo };

inline constexpr Method kAllMethods[] = {Method::fedavg,  Method::fedprox, Method::feddyn,
                                         Method::fedcm,   Method::fedsam,  Method::fedgamma,
                                         Method::fedspeed, Method::fedsmoo};

std::string_view to_string(Method m);
Method parse_method(std::string_view text);

/// Methods whose local step takes a sharpness-aware (two-gradient) step.
bool is_sam_family(Method m);

/// Hyperparameter names a method accepts, e.g. {"rho", "prox_weight", "sam_guard"}.
std::span<const std::string_view> legal_hparams(Method m);

struct HyperParams {
  double lambda = 0.01;      // fedprox proximal coefficient
  double beta = 0.01;        // feddyn / fedsmoo dynamic regularizer
  double mu = 0.1;           // fedcm gradient weight
  double rho = 0.01;         // SAM radius
  double prox_weight = 0.1;  // fedspeed proximal weight
  double sam_guard = 1e-12;  // added to gradient norms before dividing

  /// Names assigned through `set`, for reporting.
  std::set<std::string> explicit_keys;

  /// Assigns `key` after checking it is legal for `m` and in range.
  void set(Method m, std::string_view key, double value);
  double get(std::string_view key) const;
  /// Range checks on every field.
  void validate() const;
  /// "-" when no key was set, else "key=value" pairs joined by ';' in
  /// legal_hparams order.
  std::string label(Method m) const;
};

struct PartitionSpec {
  enum class Kind { iid, dirichlet };
  Kind kind = Kind::iid;
  double alpha = 0.0;

  static PartitionSpec iid() { return {}; }
  static PartitionSpec dirichlet(double a) { return {Kind::dirichlet, a}; }

  /// "iid" or "dirichlet(<alpha>)".
  std::string to_string() const;
  static PartitionSpec parse(std::string_view text);
  bool operator==(const PartitionSpec&) const = default;
};

struct RunConfig {
  std::size_t n_clients = 10;
  std::size_t sample_size = 10;
  std::size_t rounds = 1;
  std::size_t local_epochs = 1;
  std::size_t batch_size = 32;
  double client_lr = 0.05;
  Method method = Method::fedavg;
  HyperParams hparams;
  PartitionSpec partition;
  std::uint64_t seed = 0;
  std::size_t eval_every = 1;
  ModelSpec model;

  /// Weight the server mean by shard size instead of uniformly.
  bool weighted_aggregation = false;
  /// Per-client local epoch counts overriding `local_epochs`.
  std::map<std::size_t, std::size_t> epochs_override;
  /// Threads running client updates within a round. Results do not depend
  /// on it.
  std::size_t workers = 1;

  std::size_t epochs_for(std::size_t client_id) const;
  /// Throws ConfigError on any violated invariant.
  void validate() const;
};

}  // namespace flsim
