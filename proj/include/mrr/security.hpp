#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace mrr {

// User-facing knob in [0, 100]: roughly the percentage of legitimate traffic a
// single defender is allowed to flag.
class SecurityParameter {
 public:
  explicit SecurityParameter(double value);
  double value() const { return value_; }
  bool flags_everything() const { return value_ >= 100.0; }

 private:
  double value_;
};

// Percentile p in [0, 100] of an ascending sample, linear interpolation between
// closest ranks (rank = p/100 * (n - 1), the numpy "linear" rule).
double percentile(std::span<const double> sorted, double p);

// Fewest benign samples per class accepted when profiling a threshold table.
inline constexpr std::size_t kMinProfileSamples = 20;

}  // namespace mrr
