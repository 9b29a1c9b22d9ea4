#pragma once

#include <cstdint>
#include <random>

namespace flsim {

/// Every consumer of randomness owns one of these; streams are never shared.
using Stream = std::mt19937_64;

std::uint64_t splitmix64(std::uint64_t x);

/// Keyed stream for (seed, round, client). Distinct keys give independent
/// streams regardless of the order in which clients execute.
Stream derive_stream(std::uint64_t seed, std::int64_t round, std::int64_t client_id);

namespace channel {
/// Client id used by the server when sampling participants.
inline constexpr std::int64_t kServer = -1;

/// Round value reserved for one-off setup draws, paired with the ids below.
inline constexpr std::int64_t kSetupRound = -1;
inline constexpr std::int64_t kInit = -2;
inline constexpr std::int64_t kPartition = -3;
inline constexpr std::int64_t kData = -4;
inline constexpr std::int64_t kSplit = -5;
}  // namespace channel

}  // namespace flsim
