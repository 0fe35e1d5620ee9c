#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace lara {

/// Seeded generator with platform-independent draws.
///
/// std::mt19937_64 has a fully specified output sequence, but the standard
/// distributions do not, so uniform/normal/below are derived here by hand.
/// Fixed seed => identical draws on every compiler and standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  /// Standard normal via Box-Muller (one value per call, no cached spare).
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Uniform integer in [0, n) by rejection; n must be > 0.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = next();
    while (x >= limit) x = next();
    return x % n;
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace lara
