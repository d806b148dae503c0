#pragma once

#include <stdexcept>
#include <string>

namespace cpae {

// Base class for everything thrown by this library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Violated precondition or API contract (bad arguments, out-of-range values).
struct ContractError : Error {
  using Error::Error;
};

// Tensor/layer shape mismatch.
struct ShapeError : ContractError {
  using ContractError::ContractError;
};

// All points of a cloud coincide; normalization impossible.
struct DegenerateCloudError : ContractError {
  using ContractError::ContractError;
};

// Malformed input file; message carries the file and line/byte offset.
struct ParseError : Error {
  using Error::Error;
};

// Unsupported file extension or bad magic bytes.
struct FormatError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

// NaN/Inf appeared in a gradient or parameter; message names the tensor.
struct TrainingDivergedError : Error {
  using Error::Error;
};

// Auction assignment did not converge within its iteration cap.
struct ApproximationFailureError : Error {
  using Error::Error;
};

}  // namespace cpae
