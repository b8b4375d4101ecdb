#pragma once

#include <stdexcept>
#include <string>

namespace sundae {

/// Invalid argument, shape or range.
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Non-finite values where finite ones are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operation not available for the model's mode.
class UnsupportedModeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Exact computation refused because the instance is too large.
class SizeError : public ArgumentError {
 public:
  using ArgumentError::ArgumentError;
};

/// Malformed or truncated file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad configuration or command line.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace sundae
