#include "mrr/rng.hpp"

#include <cmath>
#include <numbers>

namespace mrr {

std::size_t Rng::below(std::size_t n) {
  // Lemire-style rejection keeps the draw unbiased.
  const std::uint64_t bound = n;
  const std::uint64_t limit = std::uint64_t(-bound) % bound;
  std::uint64_t r = 0;
  do {
    r = engine_();
  } while (r < limit);
  return static_cast<std::size_t>(r % bound);
}

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace mrr
