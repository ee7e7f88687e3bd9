#pragma once

#include <stdexcept>
#include <string>

namespace strata_bounds {

/// Input does not describe a usable experiment (bad CSV, infeasible design).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// CSV row could not be parsed. `row()` is 1-based and counts the header.
class ParseError : public ValidationError {
 public:
  ParseError(std::size_t row, const std::string& what)
      : ValidationError("row " + std::to_string(row) + ": " + what), row_(row) {}
  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

/// Data is valid but an estimator or variance component is undefined on it.
class EstimationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Retained mass after trimming falls below one observation.
class DegenerateTrimError : public EstimationError {
 public:
  using EstimationError::EstimationError;
};

class SingularJacobianError : public EstimationError {
 public:
  using EstimationError::EstimationError;
};

/// Fitted parameters violate the sample moment conditions beyond their bound.
class InternalConsistencyError : public EstimationError {
 public:
  using EstimationError::EstimationError;
};

}  // namespace strata_bounds
