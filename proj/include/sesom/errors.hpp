#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace sesom {

// Error taxonomy shared by the whole library. The CLI maps these onto
// process exit codes (config -> 2, numeric -> 3, io -> 4).

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IndexError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DegenerateInputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InvalidMapError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct LookupError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed on-disk data; carries the byte offset where parsing failed.
struct FormatError : IoError {
  FormatError(const std::string& what, std::size_t byte_offset)
      : IoError(what + " (byte offset " + std::to_string(byte_offset) + ")"),
        offset(byte_offset) {}
  std::size_t offset;
};

// Checkpoint written by an incompatible format revision.
struct VersionError : FormatError {
  using FormatError::FormatError;
};

}  // namespace sesom
