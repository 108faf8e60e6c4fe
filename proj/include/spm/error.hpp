#pragma once

#include <stdexcept>
#include <string>

namespace spm {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor extents.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Integer argument outside its admissible range (curve coordinates, indices).
class RangeError : public Error {
 public:
  using Error::Error;
};

// Real argument outside the domain of a formula (e.g. non-positive step size).
class DomainError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf produced by a computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// A function was called outside its stated contract.
class ContractError : public Error {
 public:
  using Error::Error;
};

class NonDeterminismError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

}  // namespace spm
