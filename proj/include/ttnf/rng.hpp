#pragma once

#include <cstdint>
#include <random>

namespace ttnf {

// Independent stream for (seed, purpose).
inline std::mt19937_64 sub_rng(std::uint64_t seed, std::uint64_t purpose) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(purpose), 0x7474u};
  return std::mt19937_64(seq);
}

inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t purpose) { return sub_rng(seed, purpose)(); }

}  // namespace ttnf
