#pragma once

#include <stdexcept>
#include <string>

namespace cosa {

/// Base class for every error raised by the library. The CLI maps the
/// subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration, grammar, or command usage (exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or missing data: corpus files, checkpoints, logs (exit code 3).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or degenerate numerics during training (exit code 4).
class NumericalError : public Error {
 public:
  using Error::Error;
};

class TokenizeError : public DataError {
 public:
  using DataError::DataError;
};

class GroupingError : public Error {
 public:
  using Error::Error;
};

class TruncationError : public Error {
 public:
  using Error::Error;
};

class MaskingError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

}  // namespace cosa
