#pragma once

#include <stdexcept>
#include <string>

namespace infodisent {

// Root of every error the library raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes that do not line up (non-square generator, channel count mismatch, empty grid).
class DimensionError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Out-of-domain scalar arguments (tau <= 0, label out of range, bad threshold).
class ParameterError : public Error {
 public:
  using Error::Error;
};

// Malformed or corrupted files.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Training aborted (non-finite loss or gradient).
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace infodisent
