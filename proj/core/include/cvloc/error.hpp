#pragma once

#include <stdexcept>
#include <string>

namespace cvloc {

// Error taxonomy used across the library. The CLI maps ShapeError/ConfigError/
// InputError/FormatError/NumericError/ContractError to exit code 1 and
// IoError/CorruptionError to exit code 2.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct InputError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
struct FormatError : Error {
  using Error::Error;
};
struct CorruptionError : Error {
  using Error::Error;
};
// Misuse of an API contract (e.g. double backward through one graph).
struct ContractError : Error {
  using Error::Error;
};

}  // namespace cvloc
