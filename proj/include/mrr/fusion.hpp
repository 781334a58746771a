#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mrr/error.hpp"

namespace mrr {

struct FusionModel {
  std::vector<double> reliabilities;  // P_n, one per defender in pipeline order
  double decision_threshold = 0.5;

  std::size_t size() const { return reliabilities.size(); }
  void validate() const;
};

// 1 - prod_n (1 - P_n)^{d_n}
double noisy_or(std::span<const bool> flags, const FusionModel& model);
double noisy_or(std::span<const bool> flags, std::span<const double> reliabilities);

// Raised when a defender flags nothing during calibration, leaving P_n undefined.
class CalibrationError : public DataError {
 public:
  using DataError::DataError;
};

struct CalibrationCounts {
  std::size_t benign_flagged = 0;       // M_False
  std::size_t adversarial_flagged = 0;  // M_True
};

// M_True / (M_False + M_True)
double estimate_pn(const CalibrationCounts& counts);
double estimate_pn(std::span<const bool> benign_flags, std::span<const bool> adversarial_flags);

enum class Alarm { Accept, Reject };

std::string to_string(Alarm a);

inline Alarm decide(double probability, double threshold = 0.5) {
  return probability >= threshold ? Alarm::Reject : Alarm::Accept;
}

}  // namespace mrr
