#include "mrr/security.hpp"

#include <cmath>
#include <string>

#include "mrr/error.hpp"

namespace mrr {

SecurityParameter::SecurityParameter(double value) : value_(value) {
  if (!(value >= 0.0 && value <= 100.0)) {
    throw DataError("security parameter " + std::to_string(value) + " outside [0, 100]");
  }
}

double percentile(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw DataError("percentile of an empty sample");
  const double rank = p / 100.0 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  if (lo + 1 >= sorted.size()) return sorted.back();
  const double frac = rank - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

}  // namespace mrr
