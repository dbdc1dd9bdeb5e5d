#pragma once

#include <array>
#include <cstdint>

#include "iba/tensor.hpp"

namespace iba {

// xoshiro256++ seeded through splitmix64. Pure integer/IEEE arithmetic, so a
// given seed yields the same draw sequence on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  double uniform();                          // [0, 1)
  double uniform(double lo, double hi);      // [lo, hi)
  std::uint64_t uniform_below(std::uint64_t n);  // unbiased in [0, n)
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);  // inclusive
  double normal();                           // standard normal, two uniforms per draw
  double trunc_normal(double sigma);         // resamples until |z| <= 2

  std::uint64_t seed() const { return seed_; }

  // Stable per-index stream derivation for order-independent generation.
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t index);

 private:
  std::array<std::uint64_t, 4> s_{};
  std::uint64_t seed_ = 0;
};

Tensor randn(Shape shape, Rng& rng, double sigma = 1.0);
Tensor rand_uniform(Shape shape, Rng& rng, double lo = 0.0, double hi = 1.0);
Tensor trunc_normal_init(Shape shape, Rng& rng, double sigma = 0.02);

}  // namespace iba
