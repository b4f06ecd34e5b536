// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

namespace smp {

/// SplitMix64 stream. The algorithm is part of the external contract: a mask
/// sampled from a given seed is reproducible byte-for-byte on any platform.
///
///   state += 0x9E3779B97F4A7C15
///   z = state
///   z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
///   z = (z ^ (z >> 27)) * 0x94D049BB133111EB
///   return z ^ (z >> 31)
class Rng {
 public:
  explicit Rng(std::uint64_t seed) noexcept : state_(seed) {}

  std::uint64_t next_u64() noexcept {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n) noexcept;

  /// Standard normal via Box-Muller; consumes two draws per call.
  double normal() noexcept;

  /// Bernoulli(p): true with probability p.
  bool bernoulli(double p) noexcept { return uniform() < p; }

  /// Independent child stream; deterministic function of this stream's state.
  Rng split() noexcept { return Rng(next_u64() ^ 0xD1B54A32D192ED03ULL); }

  std::uint64_t state() const noexcept { return state_; }

 private:
  std::uint64_t state_;
};

}  // namespace smp
