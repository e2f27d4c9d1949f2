#pragma once

// Seed splitting. Every random draw in the library derives from one 64-bit
// root seed: a stream key is mixed from (seed, tag, index...) with the
// splitmix64 finalizer, then used to seed a std::mt19937_64.

#include <cstdint>
#include <random>
#include <string_view>

namespace sfsl {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// FNV-1a, used to turn stream names into counters.
inline std::uint64_t hash_tag(std::string_view tag) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : tag) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t counter) {
  return splitmix64(splitmix64(seed) ^ splitmix64(counter + 0x632be59bd9b4e019ULL));
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
  return derive_seed(seed, hash_tag(tag));
}

template <class... Rest>
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag, std::uint64_t index,
                          Rest... rest) {
  std::uint64_t s = derive_seed(derive_seed(seed, tag), index);
  ((s = derive_seed(s, static_cast<std::uint64_t>(rest))), ...);
  return s;
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed, std::string_view tag) { return Rng(derive_seed(seed, tag)); }

}  // namespace sfsl
