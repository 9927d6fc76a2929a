#pragma once

#include <stdexcept>
#include <string>

namespace sae {

/// Bad input data, an ill-posed fit, or a solver that failed to converge.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Solver ran out of iterations. Derives from DataError so callers that
/// only care about "estimate unavailable" can catch the base.
class ConvergenceError : public DataError {
 public:
  using DataError::DataError;
};

/// Invalid argument or configuration supplied by the caller.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace sae
