#pragma once

#include <cstdint>
#include <limits>

namespace cicada {

/// SplitMix64. Satisfies UniformRandomBitGenerator; the output sequence is
/// fixed by the algorithm, so generated weights are reproducible everywhere.
class SplitMix64 {
 public:
  using result_type = std::uint64_t;

  explicit constexpr SplitMix64(std::uint64_t seed) noexcept : state_(seed) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  constexpr result_type operator()() noexcept {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform double in [0, 1) from the top 53 bits.
  double uniform01() noexcept { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  /// Uniform float in [-1, 1) from the top 24 bits.
  float symmetric_float() noexcept {
    const auto bits = static_cast<std::uint32_t>((*this)() >> 40);
    return static_cast<float>(bits) * 0x1.0p-23f - 1.0f;
  }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform01(); }

 private:
  std::uint64_t state_;
};

/// Stream seed for a (seed, index) pair.
constexpr std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) noexcept {
  SplitMix64 g(seed ^ (index * 0xD1B54A32D192ED03ULL));
  return g();
}

}  // namespace cicada
