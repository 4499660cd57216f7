#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace swimps {

/// SplitMix64 finalizer (Steele, Lea & Flood). Used both as a stream
/// generator and as a stateless hash for keyed draws.
constexpr std::uint64_t splitmix64_mix(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Deterministic noise source: SplitMix64 stream, 53-bit uniform doubles and
/// Box-Muller normals (cosine branch only, one uniform pair per normal).
///
/// The whole pipeline is spelled out here rather than borrowed from
/// <random>: the standard distributions are implementation-defined, and
/// seeded runs must produce the same numbers on every toolchain.
class NoiseSource {
public:
  static constexpr std::uint64_t golden_gamma = 0x9E3779B97F4A7C15ULL;

  constexpr explicit NoiseSource(std::uint64_t seed = 0) noexcept : state_(seed) {}

  /// Stream keyed by two values, e.g. (scenario seed, device id).
  static constexpr NoiseSource keyed(std::uint64_t seed, std::uint64_t key) noexcept {
    return NoiseSource(splitmix64_mix(seed ^ splitmix64_mix(key + golden_gamma)));
  }

  constexpr std::uint64_t next_u64() noexcept {
    state_ += golden_gamma;
    return splitmix64_mix(state_);
  }

  /// Uniform in [0, 1).
  constexpr double uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Standard normal.
  double gaussian() noexcept {
    const double u1 = 1.0 - uniform(); // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double gaussian(double sigma) noexcept { return sigma * gaussian(); }

private:
  std::uint64_t state_;
};

} // namespace swimps
