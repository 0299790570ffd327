#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace pplab {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or vector dimensions do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid or inconsistent configuration value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite or otherwise unusable input value.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the support of a density.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Quadrature, fitting or other numerical routine failed to converge.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Correlation requested on constant input.
class UndefinedCorrelation : public Error {
 public:
  using Error::Error;
};

class TrainingDiverged : public Error {
 public:
  TrainingDiverged(const std::string& what, std::int64_t step)
      : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}

  std::int64_t step() const noexcept { return step_; }

 private:
  std::int64_t step_;
};

}  // namespace pplab
