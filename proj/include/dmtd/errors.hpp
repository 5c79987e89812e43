#pragma once

#include <stdexcept>
#include <string>

namespace dmtd {

// Base of every error raised by the library. The CLI maps the concrete
// subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid hyperparameters, partitions, cycle plans or run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

// Non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// A caller broke an operation's precondition (missing grad, non-scalar loss...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Attention tried to read a KV slot that is not Filled.
class CacheIntegrityError : public Error {
 public:
  using Error::Error;
};

// Unreadable corpus, malformed or corrupt checkpoint.
class DataError : public Error {
 public:
  using Error::Error;
};

class ChecksumError : public DataError {
 public:
  using DataError::DataError;
};

}  // namespace dmtd
