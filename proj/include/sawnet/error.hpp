#pragma once

#include <stdexcept>
#include <string>

namespace sawnet {

// Process exit codes used by the command-line front end.
enum class ExitCode : int {
  ok = 0,
  verification_failure = 1,
  config_error = 2,
  io_error = 3,
};

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual ExitCode exit_code() const noexcept { return ExitCode::verification_failure; }
};

// Shape disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Caller broke an API precondition (e.g. backward on a non-scalar).
class ContractError : public Error {
 public:
  using Error::Error;
};

class UnknownLeafError : public Error {
 public:
  using Error::Error;
};

// Non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::config_error; }
};

// Input data violates its declared vocabulary (labels, part ranges).
class DataError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::config_error; }
};

class IoError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::io_error; }
};

class ParseError : public IoError {
 public:
  using IoError::IoError;
};

class CorruptionError : public IoError {
 public:
  using IoError::IoError;
};

class VersionError : public IoError {
 public:
  using IoError::IoError;
};

}  // namespace sawnet
