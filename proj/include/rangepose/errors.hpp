#pragma once

#include <stdexcept>
#include <string>

namespace rangepose {

/// Invalid or inconsistent configuration (unknown ids, missing fields, bad dimensions).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A precondition on a function argument was violated.
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// The normal equations could not be factorized.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The information matrix is singular along some directions of the state.
class UnobservableError : public std::runtime_error {
 public:
  // null_space_dim is -1 when the deficiency was found from geometry alone.
  UnobservableError(const std::string& what, int null_space_dim = -1)
      : std::runtime_error(what), null_space_dim_(null_space_dim) {}

  int null_space_dim() const { return null_space_dim_; }

 private:
  int null_space_dim_;
};

}  // namespace rangepose
