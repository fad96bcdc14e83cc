#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace dbn {

inline constexpr std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (char c : s) {
    h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
    h *= 1099511628211ull;
  }
  return h;
}

/// Deterministic uniform generator. std::mt19937_64 has a pinned bit stream,
/// and the helpers below avoid the implementation-defined std distributions,
/// so a given seed yields identical draws on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  /// Uniform double in [0, 1).
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  /// Uniform double in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  int uniform_int(int n) { return static_cast<int>(uniform() * n); }

  std::uint64_t raw() { return eng_(); }

  /// Seed for an independent child stream, stable in (parent seed, tag).
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t tag) {
    std::uint64_t x = seed ^ (tag + 0x9e3779b97f4a7c15ull + (seed << 6) + (seed >> 2));
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ull;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebull;
    x ^= x >> 31;
    return x;
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace dbn
