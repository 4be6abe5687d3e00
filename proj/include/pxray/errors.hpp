#pragma once

#include <stdexcept>
#include <string>

namespace pxray {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or layer dimensions do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A weight or data file is not well-formed JSON or has an unknown layer type.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// A weight file parses but its arrays disagree with the declared shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Weight file declares a format version this build cannot read.
class VersionError : public Error {
 public:
  using Error::Error;
};

/// A propagation rule was called outside its precondition.
class ContractViolation : public Error {
 public:
  using Error::Error;
};

/// Behavioral cloning diverged.
class TrainingError : public Error {
 public:
  using Error::Error;
};

/// Invalid user configuration (CLI flags, config files).
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace pxray
