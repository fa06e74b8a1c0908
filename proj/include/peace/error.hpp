#pragma once

#include <stdexcept>
#include <string>

namespace peace {

/// Bad input: malformed files, violated preconditions, bad configuration.
/// The CLI maps this to exit code 1.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Failure while doing well-formed work (I/O, numerical breakdown).
/// The CLI maps this to exit code 2.
class RuntimeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericError : public RuntimeError {
 public:
  using RuntimeError::RuntimeError;
};

}  // namespace peace
