#pragma once

#include <stdexcept>
#include <string>

namespace ebsa {

/// Operand shapes or dimensions do not line up.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// An API was called in a state it does not support.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A value broke a documented invariant (e.g. non-positive std).
struct InvariantError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// NaN or inf surfaced during a numeric procedure.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace ebsa
