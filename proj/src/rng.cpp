#include "fqt/rng.hpp"

#include <cmath>
#include <numbers>

namespace fqt {

Rng Rng::substream(std::uint64_t seed, std::uint64_t trial, std::uint64_t layer,
                   std::uint64_t lane) {
  std::uint64_t k = mix(seed ^ 0x6a09e667f3bcc908ULL);
  k = mix(k ^ (trial + 0x3c6ef372fe94f82bULL));
  k = mix(k ^ (layer + 0xa54ff53a5f1d36f1ULL));
  k = mix(k ^ (lane + 0x510e527fade682d1ULL));
  return Rng(k);
}

double Rng::normal() {
  // 1 - u keeps the log argument in (0, 1].
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t Rng::below(std::uint64_t n) {
  // Rejection sampling for an unbiased draw.
  const std::uint64_t limit = max() - max() % n;
  std::uint64_t x;
  do {
    x = (*this)();
  } while (x >= limit);
  return x % n;
}

}  // namespace fqt
