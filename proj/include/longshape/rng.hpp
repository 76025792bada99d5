/// Purpose-split random number streams. Every consumer derives its own
/// mt19937_64 from (seed, purpose, salt), so adding parallelism or reordering
/// independent work never changes what any stream produces.
#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace longshape {

enum class RngPurpose : std::uint64_t {
  Proposals = 1,
  Acceptance = 2,
  Simulation = 3,
  Personalization = 4,
};

inline std::mt19937_64 make_rng(std::uint64_t seed, RngPurpose purpose, std::uint64_t salt = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(purpose),
                    static_cast<std::uint32_t>(salt), static_cast<std::uint32_t>(salt >> 32)};
  return std::mt19937_64(seq);
}

inline std::string serialize_rng(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline std::mt19937_64 deserialize_rng(const std::string& text) {
  std::istringstream is(text);
  std::mt19937_64 rng;
  is >> rng;
  if (!is) throw std::invalid_argument("invalid serialized rng state");
  return rng;
}

}  // namespace longshape
