#pragma once

#include <stdexcept>
#include <string>

namespace causalgaze {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not compose.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced or consumed where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents or a record that violates its invariants.
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values or arguments.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace causalgaze
