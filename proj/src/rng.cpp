#include "hbasin/rng.hpp"

namespace hbasin {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> stream) {
  std::uint64_t h = splitmix64(master);
  for (auto s : stream) h = splitmix64(h ^ splitmix64(s));
  return h;
}

std::uint64_t uniform_index(Rng& rng, std::uint64_t bound) {
  if (bound <= 1) return 0;
  const std::uint64_t limit = Rng::max() - (Rng::max() % bound) - 1;
  for (;;) {
    const std::uint64_t x = rng();
    if (x <= limit) return x % bound;
  }
}

}  // namespace hbasin
