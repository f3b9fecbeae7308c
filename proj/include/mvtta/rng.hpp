#pragma once

// Portable random draws.
//
// std::mt19937_64 has a bit-exact output sequence mandated by the standard,
// but the std distributions do not. Everything that must reproduce across
// toolchains goes through the functions below instead:
//
//   uniform_below(g, n)  rejection sampling on the raw 64-bit output
//                        (reject r < 2^64 mod n, return r mod n)
//   uniform01(g)         top 53 bits scaled by 2^-53, in [0, 1)
//   standard_normal(g)   Box-Muller, cosine branch only (one draw pair per
//                        variate, no cached second value)
//   derive_seed(s, ...)  SplitMix64 finalizer chained over the inputs

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <random>

namespace mvtta::rng {

using Engine = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Independent stream seed for (seed, i, j, ...).
inline std::uint64_t derive_seed(std::uint64_t seed,
                                 std::initializer_list<std::uint64_t> keys) {
  std::uint64_t h = splitmix64(seed);
  for (auto k : keys) {
    h = splitmix64(h ^ splitmix64(k + 0x632be59bd9b4e019ULL));
  }
  return h;
}

inline std::uint64_t uniform_below(Engine &g, std::uint64_t n) {
  const std::uint64_t threshold = (0 - n) % n;
  for (;;) {
    const std::uint64_t r = g();
    if (r >= threshold) {
      return r % n;
    }
  }
}

inline double uniform01(Engine &g) {
  return static_cast<double>(g() >> 11) * 0x1.0p-53;
}

inline double standard_normal(Engine &g) {
  double u1 = uniform01(g);
  while (u1 <= 0.0) {
    u1 = uniform01(g);
  }
  const double u2 = uniform01(g);
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(2.0 * std::numbers::pi * u2);
}

template <class RandomIt>
void shuffle(RandomIt first, RandomIt last, Engine &g) {
  const auto n = static_cast<std::uint64_t>(last - first);
  for (std::uint64_t i = n; i > 1; --i) {
    const auto j = uniform_below(g, i);
    std::swap(first[i - 1], first[j]);
  }
}

} // namespace mvtta::rng
