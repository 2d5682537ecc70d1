#pragma once

#include <stdexcept>
#include <string>

namespace multehr {

// Base of every error raised by the library. The CLI maps subclasses to exit
// codes: ConfigError -> 1, DataError -> 2, everything else -> 3.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

// Violated precondition of an operation (wrong argument, bad state).
class ContractError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace multehr
