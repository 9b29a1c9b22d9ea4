#include "flsim/rng.hpp"

namespace flsim {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

Stream derive_stream(std::uint64_t seed, std::int64_t round, std::int64_t client_id) {
  const std::uint64_t key =
      splitmix64(splitmix64(static_cast<std::uint64_t>(round)) ^
                 (static_cast<std::uint64_t>(client_id) * 0xD1B54A32D192ED03ULL));
  return Stream(splitmix64(seed ^ key));
}

}  // namespace flsim
