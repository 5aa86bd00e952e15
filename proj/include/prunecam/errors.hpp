#pragma once

#include <stdexcept>
#include <string>

namespace prunecam {

// Bad or inconsistent run configuration (CLI exit code 1).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A required upstream artifact (checkpoint, dataset, report) is missing
// (CLI exit code 2).
class MissingArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Numerical failure: divergence, non-convergence, NaN/Inf (CLI exit code 3).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shape contract violation.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace prunecam
