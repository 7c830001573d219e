#pragma once

#include <stdexcept>
#include <string>

namespace cdne {

// Error taxonomy shared across the library. The CLI maps these onto exit
// codes: ValidationError/SchemaError -> 2 (bad usage or config), everything
// else -> 1 (runtime failure).
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape mismatch between tensors.
struct DimensionError : Error {
  using Error::Error;
};

// Input outside an op's mathematical domain (e.g. sqrt of a negative).
struct DomainError : Error {
  using Error::Error;
};

// Non-finite value produced by a forward op or detected in a loss.
struct NumericError : Error {
  using Error::Error;
};

// API misuse: detached losses, double backward, bad head index, ...
struct ContractError : Error {
  using Error::Error;
};

// Invalid user-supplied values (specs, configs, fold counts).
struct ValidationError : Error {
  using Error::Error;
};

// Malformed file contents (manifest, config file, checkpoint).
struct SchemaError : Error {
  using Error::Error;
};

// Filesystem failures; messages name the offending path or bag id.
struct IoError : Error {
  using Error::Error;
};

}  // namespace cdne
