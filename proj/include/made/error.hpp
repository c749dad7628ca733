#pragma once

#include <stdexcept>

namespace made {

/// Operand shapes violate an op's contract.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A forward value or gradient left the finite range.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid model, training, transfer or experiment configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed or inconsistent dataset input.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A dataset id with no matching adapter/head pair.
class UnknownExpertError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// Checkpoint bytes that cannot be decoded.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace made
