#pragma once

#include <stdexcept>
#include <string>

namespace indiformer {

// Every failure the library reports derives from Error so callers can catch
// one type at the boundary (the CLI maps it to a nonzero exit code).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes that cannot participate in the requested operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A NaN or Inf appeared where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Caller-supplied data violates an operation's precondition.
class InvalidInput : public Error {
 public:
  using Error::Error;
};

/// Hyper-parameters or architecture settings are inconsistent.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Filesystem or container-format problems.
class IoError : public Error {
 public:
  using Error::Error;
};

class FileNotFound : public IoError {
 public:
  using IoError::IoError;
};

class UnsupportedChannelCount : public IoError {
 public:
  using IoError::IoError;
};

class UnsupportedCodec : public IoError {
 public:
  using IoError::IoError;
};

/// Checkpoint manifest does not describe the configured architecture.
class ManifestError : public IoError {
 public:
  using IoError::IoError;
};

}  // namespace indiformer
