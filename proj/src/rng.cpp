// SPDX-License-Identifier: Apache-2.0
#include "smp/rng.hpp"

#include <cmath>
#include <numbers>

namespace smp {

std::uint64_t Rng::below(std::uint64_t n) noexcept {
  // Lemire-style rejection keeps the draw unbiased for every n.
  const std::uint64_t limit = (~std::uint64_t{0} / n) * n;
  std::uint64_t x = next_u64();
  while (x >= limit) x = next_u64();
  return x % n;
}

double Rng::normal() noexcept {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace smp
