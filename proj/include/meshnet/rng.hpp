#pragma once

#include <cmath>
#include <cstdint>

namespace meshnet {

// Counter-based generator: draw i of stream `seed` is a pure function of
// (seed, i), so streams can be replayed or split across workers without
// carrying generator state. Core mixer is the splitmix64 finalizer.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t counter_hash(std::uint64_t seed, std::uint64_t index) {
  return splitmix64(seed + (index + 1) * 0x9E3779B97F4A7C15ULL);
}

/// Maps a u64 to (0, 1]; never returns 0, so it is safe under log().
inline double unit_open(std::uint64_t bits) {
  return static_cast<double>((bits >> 11) + 1) * 0x1.0p-53;
}

/// k-th standard normal deviate of a stream, Box-Muller cosine branch.
/// Consumes counters 2k and 2k+1.
inline double normal_at(std::uint64_t seed, std::uint64_t k) {
  const double u1 = unit_open(counter_hash(seed, 2 * k));
  const double u2 = unit_open(counter_hash(seed, 2 * k + 1));
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
}

/// Sequential convenience wrapper over the counter stream.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t next_u64() { return counter_hash(seed_, counter_++); }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) {
    return lo + (hi - lo) * (static_cast<double>(next_u64() >> 11) * 0x1.0p-53);
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    const double u1 = unit_open(next_u64());
    const double u2 = unit_open(next_u64());
    return mean + stddev * std::sqrt(-2.0 * std::log(u1)) *
                      std::cos(6.283185307179586476925287 * u2);
  }

  bool bernoulli(double p) {
    return (static_cast<double>(next_u64() >> 11) * 0x1.0p-53) < p;
  }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

  std::uint64_t seed() const { return seed_; }

  /// Derives an independent stream; used to decouple e.g. dropout draws
  /// from sampler draws under one user-facing seed.
  Rng fork(std::uint64_t tag) const { return Rng(splitmix64(seed_ ^ tag)); }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

}  // namespace meshnet
