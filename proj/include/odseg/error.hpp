#pragma once

#include <stdexcept>
#include <string>

namespace odseg {

/// Base class of every error raised by the library. The CLI maps each
/// subclass onto a distinct process exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible extents, ranks or axes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced by an operation, or a division by a near-zero value.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated on-disk data (ODSV volumes, ODSC checkpoints).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Bad configuration key or value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Input volume channel count does not match the network.
class ChannelMismatchError : public ShapeError {
 public:
  using ShapeError::ShapeError;
};

/// Invalid argument value that is not a shape problem (probabilities out of
/// range, labels outside the class set, ...).
class ValueError : public Error {
 public:
  using Error::Error;
};

}  // namespace odseg
