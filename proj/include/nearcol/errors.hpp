#pragma once

#include <stdexcept>
#include <string>

namespace nearcol {

/// Raised when a configuration or model violates a stated bound. Maps to CLI exit code 1.
class ConfigError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/// Raised for failures during execution (I/O, divergence, corrupt files). Maps to CLI exit code 2.
class RuntimeError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class IoError : public RuntimeError {
  public:
    using RuntimeError::RuntimeError;
};

class TrainingError : public RuntimeError {
  public:
    using RuntimeError::RuntimeError;
};

class FitError : public RuntimeError {
  public:
    using RuntimeError::RuntimeError;
};

class InsufficientHistoryError : public RuntimeError {
  public:
    using RuntimeError::RuntimeError;
};

}  // namespace nearcol
