#pragma once

#include <stdexcept>
#include <string>

namespace mmfusion {

// Bad input: malformed files, shape mismatches, out-of-range arguments.
// The CLI maps this to exit code 2.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Failures that happen while computing on valid input (non-finite values,
// I/O failures mid-run). The CLI maps this to exit code 3.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mmfusion
