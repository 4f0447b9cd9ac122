#pragma once

#include <stdexcept>
#include <string>

namespace iselab {

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Tensor shape / dimension mismatch.
struct ShapeError : Error {
  using Error::Error;
};

/// Out-of-range token, segment, or row index.
struct IndexError : Error {
  using Error::Error;
};

/// Invalid model/run configuration.
struct ConfigError : Error {
  using Error::Error;
};

/// Malformed binary file (checkpoint header, payload size, version).
struct FormatError : Error {
  using Error::Error;
};

/// Malformed text input (JSONL line, payload string).
struct ParseError : Error {
  using Error::Error;
};

/// NaN/Inf encountered where finite values are required.
struct NumericError : Error {
  using Error::Error;
};

/// Misuse of the autodiff tape (backward without a recorded graph, etc.).
struct TapeError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

}  // namespace iselab
