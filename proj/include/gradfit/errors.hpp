#pragma once

#include <stdexcept>
#include <string>

namespace gradfit {

// Bad user input: malformed config files, invalid parameter combinations.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed or inconsistent data files.
struct SchemaError : ConfigError {
  using ConfigError::ConfigError;
};

// Numerical failures surfaced to the caller rather than papered over.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Singular system where an invertible one is required (e.g. lambda = 0
// with a rank-deficient Gram matrix).
struct RankError : NumericError {
  using NumericError::NumericError;
};

// Requested feature dimension or problem size above the configured cap.
struct CapacityError : NumericError {
  using NumericError::NumericError;
};

// Derivative requested for a kernel family that does not have one.
struct NonDifferentiableError : NumericError {
  using NumericError::NumericError;
};

}  // namespace gradfit
