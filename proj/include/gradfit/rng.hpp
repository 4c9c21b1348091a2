#pragma once

// Deterministic randomness utilities. Every stochastic routine in the
// library takes an explicit 64-bit seed; substreams are derived from a
// master seed by hashing, never by sharing mutable engine state.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace gradfit {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Substream derivation: seed of stream (a, b, c) under `master` is the
// SplitMix64 chain over the tuple. Used as
//   derive_seed(master, cell_index, replication, purpose)
// so that any cell/replication is reproducible in isolation.
constexpr std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a,
                                    std::uint64_t b = 0, std::uint64_t c = 0) {
  std::uint64_t h = splitmix64(master);
  h = splitmix64(h ^ a);
  h = splitmix64(h ^ b);
  h = splitmix64(h ^ c);
  return h;
}

// Seeded generator with the handful of sampling routines the library
// needs. All samplers are explicit formulas over mt19937_64 words, so a
// given seed yields the same stream on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1), 53-bit resolution.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform on the open interval (0, 1); safe under log/tan transforms.
  double uniform_open() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller with an explicit spare slot.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform_open();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double cauchy(double scale) {
    return scale * std::tan(std::numbers::pi * (uniform_open() - 0.5));
  }

  double laplace(double scale) {
    const double u = uniform_open();
    return u < 0.5 ? scale * std::log(2.0 * u) : -scale * std::log(2.0 * (1.0 - u));
  }

  // Student-t with 5 degrees of freedom: z / sqrt(chi2_5 / 5).
  double student_t5() {
    const double z = normal();
    double chi2 = 0.0;
    for (int i = 0; i < 5; ++i) {
      const double g = normal();
      chi2 += g * g;
    }
    return z * std::sqrt(5.0 / chi2);
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace gradfit
