#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace nlc {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class ParameterError : public Error {
 public:
  using Error::Error;
};

class StatisticsError : public Error {
 public:
  using Error::Error;
};

class CapacityError : public Error {
 public:
  using Error::Error;
};

class ConsistencyError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Raised when batchnorm is evaluated on a batch too small for batch statistics.
class BatchSizeError : public Error {
 public:
  using Error::Error;
};

/// A quantity collapsed to a value for which the requested statistic is undefined
/// (constant activation, constant network output, zero gradients, ...).
class DegenerateError : public Error {
 public:
  using Error::Error;
};

/// Constant network output: the output bias is infinite.
class InfiniteBiasError : public DegenerateError {
 public:
  using DegenerateError::DegenerateError;
};

/// A non-finite value appeared while propagating through the network.
class OverflowError : public Error {
 public:
  OverflowError(std::size_t layer, const std::string& what)
      : Error("non-finite value in layer " + std::to_string(layer) + ": " + what), layer_(layer) {}

  std::size_t layer() const noexcept { return layer_; }

 private:
  std::size_t layer_;
};

class ParseError : public Error {
 public:
  ParseError(std::size_t line, std::size_t column, const std::string& what)
      : Error("line " + std::to_string(line) + ", column " + std::to_string(column) + ": " + what),
        line_(line),
        column_(column) {}

  std::size_t line() const noexcept { return line_; }
  std::size_t column() const noexcept { return column_; }

 private:
  std::size_t line_;
  std::size_t column_;
};

}  // namespace nlc
