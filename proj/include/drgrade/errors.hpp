#pragma once

#include <stdexcept>
#include <string>

namespace drgrade {

// Caller supplied something that violates a documented precondition
// (bad shape, bad ratio, malformed row). The CLI maps these to exit code 2.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Failures while running a well-formed request (I/O, corrupt files,
// divergence). The CLI maps these to exit code 3.
class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace drgrade
