#pragma once

#include <stdexcept>
#include <string>

namespace zsih {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or dimension disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A value outside the mathematical domain of an operation (log of 0, bits > 1, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Caller broke an API contract (e.g. backward on a non-scalar).
class ContractError : public Error {
 public:
  using Error::Error;
};

class AdjacencyError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DatasetError : public Error {
 public:
  using Error::Error;
};

class BatchSizeError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary or text file. The message names the byte offset or line.
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

}  // namespace zsih
