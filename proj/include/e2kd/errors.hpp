#pragma once

#include <stdexcept>
#include <string>

namespace e2kd {

/// Base for every error raised by the library. The CLI maps the concrete
/// subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid model spec, config file, or parameter combination.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed tensor arguments (shape, range, finiteness).
class InputError : public Error {
 public:
  using Error::Error;
};

/// Operation not available for a model family or explanation method.
class UnsupportedError : public Error {
 public:
  using Error::Error;
};

class GeometryError : public Error {
 public:
  using Error::Error;
};

class StorageError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class StateError : public Error {
 public:
  using Error::Error;
};

/// Digest or manifest mismatch between declared and actual inputs.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or parameters during optimization.
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace e2kd
