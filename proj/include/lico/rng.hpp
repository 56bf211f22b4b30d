#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace lico {

using Rng = std::mt19937_64;

/// Independent generator for a (seed, stream, counter) triple. Derived
/// streams let any step of a run be reproduced without replaying the ones
/// before it.
inline Rng derive_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t counter = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                    static_cast<std::uint32_t>(counter),
                    static_cast<std::uint32_t>(counter >> 32)};
  return Rng(seq);
}

// Stream identifiers.
namespace streams {
inline constexpr std::uint64_t kImageInit = 1;
inline constexpr std::uint64_t kTextInit = 2;
inline constexpr std::uint64_t kFrozenEncoder = 3;
inline constexpr std::uint64_t kClassTokens = 4;
inline constexpr std::uint64_t kEpochOrder = 5;
inline constexpr std::uint64_t kContextShuffle = 6;
inline constexpr std::uint64_t kData = 7;
inline constexpr std::uint64_t kRandomize = 8;
}  // namespace streams

}  // namespace lico
