#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace cvloc {

// SplitMix64 step; also used as the mixing function for seed derivation.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_combine(std::uint64_t seed, std::uint64_t v) {
  return splitmix64(seed ^ (0x9e3779b97f4a7c15ull + splitmix64(v)));
}

inline std::uint64_t hash_str(std::uint64_t seed, std::string_view tag) {
  std::uint64_t h = seed;
  for (char c : tag) h = splitmix64(h ^ static_cast<std::uint8_t>(c));
  return h;
}

// Deterministic, splittable RNG. Every stream is derived from a root seed
// plus tags, so independent streams can be drawn in any order and in
// parallel without changing results.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(splitmix64(seed)) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

  // Box-Muller; does not rely on std::normal_distribution so sequences are
  // identical across standard libraries.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 1e-300) u1 = uniform();
    double u2 = uniform();
    double mag = std::sqrt(-2.0 * std::log(u1));
    spare_ = mag * std::sin(6.283185307179586476925286766559 * u2);
    have_spare_ = true;
    return mag * std::cos(6.283185307179586476925286766559 * u2);
  }

  Rng fork(std::string_view tag) const { return Rng(hash_str(state_, tag)); }
  Rng fork(std::uint64_t v) const { return Rng(hash_combine(state_, v)); }

 private:
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace cvloc
