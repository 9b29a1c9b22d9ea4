#include <doctest.h>

#include <array>
#include <set>

#include "flsim/rng.hpp"

using namespace flsim;

namespace {
std::array<std::uint64_t, 4> prefix(Stream s) { return {s(), s(), s(), s()}; }
}  // namespace

TEST_CASE("derive_stream is a pure function of its key") {
  CHECK(prefix(derive_stream(5, 3, 7)) == prefix(derive_stream(5, 3, 7)));
  CHECK(prefix(derive_stream(5, 0, 1)) != prefix(derive_stream(5, 1, 0)));
  CHECK(prefix(derive_stream(5, 0, 1)) != prefix(derive_stream(6, 0, 1)));
}

TEST_CASE("no prefix collisions over 10^4 (round, client) pairs") {
  std::set<std::array<std::uint64_t, 4>> seen;
  for (std::int64_t r = -1; r < 99; ++r) {
    for (std::int64_t c = -5; c < 95; ++c) seen.insert(prefix(derive_stream(42, r, c)));
  }
  CHECK(seen.size() == 10000);
}
