#pragma once

#include <stdexcept>
#include <string>

namespace gramsmear {

/// Bad input data: malformed files, contract violations on values, unknown ids.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A computation produced NaN or Inf.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or dimension mismatch between tensors, masks or plans.
class ShapeError : public DataError {
 public:
  using DataError::DataError;
};

}  // namespace gramsmear
