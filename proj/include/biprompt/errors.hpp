#pragma once

#include <stdexcept>
#include <string>

namespace biprompt {

// Thrown when an argument violates a documented precondition (shape
// mismatch, out-of-range value, malformed input).
struct InvalidInputError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Thrown when the task itself is ill-posed (fewer than two classes,
// duplicate class names, empty parameter grid).
struct InvalidTaskError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Thrown for inputs that are technically well-formed but numerically
// meaningless, e.g. a zero-norm vector fed to cosine similarity.
struct DegenerateInputError : std::domain_error {
  using std::domain_error::domain_error;
};

// Thrown when an encoder cannot provide a capability (spatial feature
// maps) that the caller requested.
struct UnsupportedEncoderError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Thrown when a computation produces non-finite values.
struct NumericalFailureError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Thrown by prompt normalization when interpolation collapses every
// class vector to (numerically) zero before renormalization.
struct DegenerateCollapseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace biprompt
