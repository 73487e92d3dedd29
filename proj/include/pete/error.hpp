#pragma once

#include <stdexcept>
#include <string>

namespace pete {

// Base class for all errors thrown by this library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Tensor shape disagreement; message names the op and both shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration (dimensions, factors, flag conflicts).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Out-of-range token id or index.
class IndexError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced where only finite values are legal.
class NumericError : public Error {
 public:
  using Error::Error;
};

// File format or filesystem failure.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace pete
