#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace hbasin {

// All randomness in the toolkit comes from std::mt19937_64 engines whose seeds
// are derived from a single master seed. A derived seed is the SplitMix64 hash
// chain over (master, stream ids...), so adding a stream never shifts another.
using Rng = std::mt19937_64;

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> stream);

/// Uniform integer in [0, bound) by rejection; independent of the standard
/// library's distribution implementation.
std::uint64_t uniform_index(Rng& rng, std::uint64_t bound);

/// Fisher-Yates shuffle driven by uniform_index.
template <typename T>
void shuffle_in_place(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform_index(rng, i));
    std::swap(v[i - 1], v[j]);
  }
}

// Stream ids used across modules.
namespace stream {
inline constexpr std::uint64_t kSplit = 0x5351;
inline constexpr std::uint64_t kBootstrap = 0xB007;
inline constexpr std::uint64_t kKmeans = 0x4B4D;
inline constexpr std::uint64_t kControl = 0xC7A1;
inline constexpr std::uint64_t kSynthetic = 0x5E7A;
inline constexpr std::uint64_t kVerifier = 0x7E51;
}  // namespace stream

}  // namespace hbasin
