#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace dermgan {

using Rng = std::mt19937_64;

/// FNV-1a, stable across platforms and runs.
[[nodiscard]] constexpr uint64_t stable_hash(std::string_view s) {
  uint64_t h = 1469598103934665603ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return h;
}

[[nodiscard]] constexpr uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Child seed for an independent stream, e.g. per case or per step.
[[nodiscard]] constexpr uint64_t derive_seed(uint64_t base, std::string_view tag) {
  return splitmix64(base ^ splitmix64(stable_hash(tag)));
}
[[nodiscard]] constexpr uint64_t derive_seed(uint64_t base, uint64_t index) {
  return splitmix64(base ^ splitmix64(index + 0x632be59bd9b4e019ULL));
}

/// Uniform integer in [lo, hi].
template <typename Int>
[[nodiscard]] Int uniform_int(Rng& rng, Int lo, Int hi) {
  return std::uniform_int_distribution<Int>(lo, hi)(rng);
}

[[nodiscard]] inline double uniform_real(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

}  // namespace dermgan
