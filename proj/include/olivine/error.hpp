#pragma once

#include <stdexcept>
#include <string>

namespace olivine {

// Root of every error the library throws. The CLI maps subclasses onto exit
// codes: UsageError -> 1, DataError -> 2, NumericError -> 3.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad arguments or configuration supplied by the caller.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Malformed or inconsistent input data: files, manifests, checkpoints.
class DataError : public Error {
 public:
  using Error::Error;
};

// Tensor shapes that do not compose.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf during training, failed gradient checks.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace olivine
