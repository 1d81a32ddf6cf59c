#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <span>

namespace olivine {

// SplitMix64 step; used for seeding and for deriving child seeds.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// xoshiro256** seeded through SplitMix64. Every random draw in the toolkit
// goes through this type so identical seeds give identical streams on every
// platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

  // Child generator keyed by a tuple of integers, e.g. (seed, epoch, index).
  static Rng derive(std::initializer_list<std::uint64_t> keys) {
    std::uint64_t h = 0x6A09E667F3BCC909ULL;
    for (std::uint64_t k : keys) {
      std::uint64_t s = h ^ k;
      h = splitmix64(s);
    }
    return Rng(h);
  }

  void reseed(std::uint64_t seed) {
    std::uint64_t s = seed;
    for (auto& word : state_) word = splitmix64(s);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1), 53 bits of precision.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi]. Consumes exactly one draw.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const double span = static_cast<double>(hi - lo) + 1.0;
    auto offset = static_cast<std::int64_t>(std::floor(uniform() * span));
    if (offset > hi - lo) offset = hi - lo;
    return lo + offset;
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via Box-Muller; consumes two draws.
  double normal() {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 < 0x1.0p-60) u1 = 0x1.0p-60;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i - 1)));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::uint64_t state_[4]{};
};

}  // namespace olivine
