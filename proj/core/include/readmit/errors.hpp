#pragma once

#include <stdexcept>
#include <string>

namespace readmit {

// Base for everything thrown by this library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad command line / config values. CLI exit code 1.
struct UsageError : Error {
  using Error::Error;
};

// Tensor extent mismatches; messages name both shapes.
struct ShapeError : Error {
  using Error::Error;
};

// An operation precondition was violated by the caller.
struct ContractError : Error {
  using Error::Error;
};

// Malformed or inconsistent input files. CLI exit code 2.
struct DataError : Error {
  using Error::Error;
};

// NaN/Inf encountered where finite values are required. CLI exit code 3.
struct NumericError : Error {
  using Error::Error;
};

}  // namespace readmit
