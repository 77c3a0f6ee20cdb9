#pragma once

#include <stdexcept>
#include <string>

namespace flare {

// Root of every error the library raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes that do not conform for the requested operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf or otherwise out-of-domain numeric input.
class InvalidValueError : public Error {
 public:
  using Error::Error;
};

// Invalid hyperparameters or flags; raised before any compute happens.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Iterative solver did not reach tolerance.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, double residual)
      : Error(what), residual_(residual) {}
  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

// Non-finite loss during training; message carries epoch, batch and value.
class TrainingError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Binary file format errors (PCF datasets, FLCK checkpoints).
class FormatError : public Error {
 public:
  using Error::Error;
};

class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};

class UnsupportedVersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};

// Checkpoint tensors do not match the parameter layout implied by its config.
class TensorMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

}  // namespace flare
