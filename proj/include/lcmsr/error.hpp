#pragma once

#include <stdexcept>
#include <string>

namespace lcmsr {

// Argument outside its documented domain (timestep, schedule endpoints, weights).
struct RangeError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Bad user input detected before any work starts: config values, empty datasets,
// missing flags. Maps to CLI exit code 1.
struct ValidationError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NonFiniteLoss : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct UnknownMetric : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

}  // namespace lcmsr
