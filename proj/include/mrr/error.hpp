#pragma once

#include <stdexcept>
#include <string>

namespace mrr {

// Violated shape contract between a tensor and the layer or operation consuming it.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Bad or inconsistent data: malformed files, out-of-range labels, insufficient samples.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training diverged (centers blew up, NaN loss, ...).
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mrr
