#include "flsim/config.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>

#include <fmt/format.h>

#include "flsim/errors.hpp"

namespace flsim {
namespace {

constexpr std::array<std::string_view, 0> kNoHparams{};
constexpr std::string_view kFedProx[] = {"lambda"};
constexpr std::string_view kFedDyn[] = {"beta"};
constexpr std::string_view kFedCm[] = {"mu"};
constexpr std::string_view kFedSam[] = {"rho", "sam_guard"};
constexpr std::string_view kFedSpeed[] = {"rho", "prox_weight", "sam_guard"};
constexpr std::string_view kFedSmoo[] = {"rho", "beta", "sam_guard"};

template <class HP>
auto field(HP& hp, std::string_view key) -> decltype(&hp.lambda) {
  if (key == "lambda") return &hp.lambda;
  if (key == "beta") return &hp.beta;
  if (key == "mu") return &hp.mu;
  if (key == "rho") return &hp.rho;
  if (key == "prox_weight") return &hp.prox_weight;
  if (key == "sam_guard") return &hp.sam_guard;
  return nullptr;
}

}  // namespace

std::string_view to_string(Method m) {
  switch (m) {
    case Method::fedavg: return "fedavg";
    case Method::fedprox: return "fedprox";
    case Method::feddyn: return "feddyn";
    case Method::fedcm: return "fedcm";
    case Method::fedsam: return "fedsam";
    case Method::fedgamma: return "fedgamma";
    case Method::fedspeed: return "fedspeed";
    case Method::fedsmoo: return "fedsmoo";
  }
  return "?";
}

Method parse_method(std::string_view text) {
  for (Method m : kAllMethods) {
    if (to_string(m) == text) return m;
  }
  throw ConfigError("unknown method '" + std::string(text) + "'");
}

bool is_sam_family(Method m) {
  return m == Method::fedsam || m == Method::fedgamma || m == Method::fedspeed ||
         m == Method::fedsmoo;
}

std::span<const std::string_view> legal_hparams(Method m) {
  switch (m) {
    case Method::fedavg: return kNoHparams;
    case Method::fedprox: return kFedProx;
    case Method::feddyn: return kFedDyn;
    case Method::fedcm: return kFedCm;
    case Method::fedsam:
    case Method::fedgamma: return kFedSam;
    case Method::fedspeed: return kFedSpeed;
    case Method::fedsmoo: return kFedSmoo;
  }
  return kNoHparams;
}

void HyperParams::set(Method m, std::string_view key, double value) {
  double* slot = field(*this, key);
  if (slot == nullptr) throw ConfigError("unknown hyperparameter '" + std::string(key) + "'");
  const auto legal = legal_hparams(m);
  if (std::find(legal.begin(), legal.end(), key) == legal.end()) {
    throw ConfigError(fmt::format("{} is illegal for {}", key, to_string(m)));
  }
  const double previous = *slot;
  *slot = value;
  try {
    validate();
  } catch (...) {
    *slot = previous;
    throw;
  }
  explicit_keys.emplace(key);
}

double HyperParams::get(std::string_view key) const {
  const double* slot = field(*this, key);
  if (slot == nullptr) throw ConfigError("unknown hyperparameter '" + std::string(key) + "'");
  return *slot;
}

void HyperParams::validate() const {
  auto non_negative = [](std::string_view name, double v) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw ConfigError(fmt::format("{} must be finite and >= 0 (got {})", name, v));
    }
  };
  non_negative("lambda", lambda);
  non_negative("beta", beta);
  non_negative("rho", rho);
  non_negative("prox_weight", prox_weight);
  if (!(mu >= 0.0 && mu <= 1.0)) throw ConfigError(fmt::format("mu must lie in [0,1] (got {})", mu));
  if (!(sam_guard > 0.0) || !std::isfinite(sam_guard)) {
    throw ConfigError(fmt::format("sam_guard must be > 0 (got {})", sam_guard));
  }
}

std::string HyperParams::label(Method m) const {
  std::string out;
  for (std::string_view key : legal_hparams(m)) {
    if (!explicit_keys.contains(std::string(key))) continue;
    if (!out.empty()) out += ';';
    out += fmt::format("{}={}", key, get(key));
  }
  return out.empty() ? "-" : out;
}

std::string PartitionSpec::to_string() const {
  return kind == Kind::iid ? "iid" : fmt::format("dirichlet({})", alpha);
}

PartitionSpec PartitionSpec::parse(std::string_view text) {
  if (text == "iid") return iid();
  constexpr std::string_view prefix = "dirichlet(";
  if (text.starts_with(prefix) && text.ends_with(")")) {
    const auto inner = text.substr(prefix.size(), text.size() - prefix.size() - 1);
    double alpha = 0.0;
    const auto [end, ec] = std::from_chars(inner.data(), inner.data() + inner.size(), alpha);
    if (ec != std::errc() || end != inner.data() + inner.size()) {
      throw ConfigError("bad Dirichlet alpha in '" + std::string(text) + "'");
    }
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("Dirichlet alpha must be >= 0");
    return dirichlet(alpha);
  }
  throw ConfigError("partition must be 'iid' or 'dirichlet(<alpha>)', got '" + std::string(text) +
                    "'");
}

std::size_t RunConfig::epochs_for(std::size_t client_id) const {
  const auto it = epochs_override.find(client_id);
  return it == epochs_override.end() ? local_epochs : it->second;
}

void RunConfig::validate() const {
  if (n_clients < 1) throw ConfigError("n_clients must be >= 1");
  if (sample_size < 1 || sample_size > n_clients) {
    throw ConfigError(fmt::format("sample_size must lie in [1, n_clients={}] (got {})", n_clients,
                                  sample_size));
  }
  if (rounds < 1) throw ConfigError("rounds must be >= 1");
  if (local_epochs < 1) throw ConfigError("local_epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(client_lr > 0.0) || !std::isfinite(client_lr)) throw ConfigError("client_lr must be > 0");
  if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
  if (workers < 1) throw ConfigError("workers must be >= 1");
  for (const auto& [client, epochs] : epochs_override) {
    if (client >= n_clients) throw ConfigError(fmt::format("epoch override for unknown client {}", client));
    if (epochs < 1) throw ConfigError(fmt::format("client {} epoch override must be >= 1", client));
  }
  hparams.validate();
  for (const auto& key : hparams.explicit_keys) {
    const auto legal = legal_hparams(method);
    if (std::find(legal.begin(), legal.end(), key) == legal.end()) {
      throw ConfigError(fmt::format("{} is illegal for {}", key, to_string(method)));
    }
  }
  if (partition.kind == PartitionSpec::Kind::dirichlet && !(partition.alpha >= 0.0)) {
    throw ConfigError("Dirichlet alpha must be >= 0");
  }
  model.validate();
}

}  // namespace flsim
