#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dtr {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid user input: formulas, configuration, column bindings.
class SpecError : public Error {
 public:
  using Error::Error;
};

/// Input data violating a schema or invariant (ragged stages, non-binary treatments, ...).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Numerical or statistical failure: singular systems, non-convergence, too many failed replicates.
class EstimationError : public Error {
 public:
  using Error::Error;
};

class FormulaError : public SpecError {
 public:
  FormulaError(const std::string& what, std::size_t position)
      : SpecError(what + " at position " + std::to_string(position)), position_(position) {}
  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

}  // namespace dtr
