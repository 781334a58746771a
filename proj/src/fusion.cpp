#include "mrr/fusion.hpp"

#include <algorithm>

namespace mrr {

void FusionModel::validate() const {
  for (double p : reliabilities) {
    if (!(p >= 0.0 && p <= 1.0)) throw DataError("reliability " + std::to_string(p) + " outside [0, 1]");
  }
  if (!(decision_threshold >= 0.0 && decision_threshold <= 1.0)) {
    throw DataError("fusion decision threshold outside [0, 1]");
  }
}

double noisy_or(std::span<const bool> flags, std::span<const double> reliabilities) {
  if (flags.size() != reliabilities.size()) {
    throw ShapeError("noisy-OR got " + std::to_string(flags.size()) + " flags for " +
                    std::to_string(reliabilities.size()) + " defenders");
  }
  double keep = 1.0;
  for (std::size_t n = 0; n < flags.size(); ++n) {
    if (flags[n]) keep *= 1.0 - reliabilities[n];
  }
  return std::clamp(1.0 - keep, 0.0, 1.0);
}

double noisy_or(std::span<const bool> flags, const FusionModel& model) {
  return noisy_or(flags, std::span<const double>(model.reliabilities));
}

double estimate_pn(const CalibrationCounts& c) {
  const std::size_t total = c.benign_flagged + c.adversarial_flagged;
  if (total == 0) {
    throw CalibrationError("defender flagged no calibration sample, reliability undefined; "
                           "enlarge the calibration data or raise the security parameter");
  }
  return static_cast<double>(c.adversarial_flagged) / static_cast<double>(total);
}

double estimate_pn(std::span<const bool> benign_flags, std::span<const bool> adversarial_flags) {
  CalibrationCounts c;
  c.benign_flagged = static_cast<std::size_t>(std::count(benign_flags.begin(), benign_flags.end(), true));
  c.adversarial_flagged =
      static_cast<std::size_t>(std::count(adversarial_flags.begin(), adversarial_flags.end(), true));
  return estimate_pn(c);
}

std::string to_string(Alarm a) { return a == Alarm::Reject ? "reject" : "accept"; }

}  // namespace mrr
