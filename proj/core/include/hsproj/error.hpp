#pragma once

#include <stdexcept>
#include <string>

namespace hsproj {

// Root of every error this library throws. The CLI maps subclasses onto exit
// codes, so new error kinds should derive from one of the classes below.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad user-supplied configuration (dimensions, hyperparameters, flags).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Tensor shapes that do not fit an operation.
class DimensionError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

// Inputs that violate an operation's numeric contract (zero vectors,
// all-masked sequences, non-finite values, mismatched batch sizes).
class ContractError : public Error {
 public:
  using Error::Error;
};

class EmptySequenceError : public ContractError {
 public:
  using ContractError::ContractError;
};

class SequenceLengthError : public ContractError {
 public:
  using ContractError::ContractError;
};

// Well-formed configuration but inconsistent data (missing qrels, empty sets).
class DataError : public Error {
 public:
  using Error::Error;
};

// A file that cannot be decoded: wrong magic, unsupported version, truncation.
class DecodeError : public DataError {
 public:
  using DataError::DataError;
};

// A well-formed file written by a different format version.
class VersionError : public DecodeError {
 public:
  using DecodeError::DecodeError;
};

// A file whose payload checksum does not match.
class CorruptionError : public DecodeError {
 public:
  using DecodeError::DecodeError;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss or gradient.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace hsproj
