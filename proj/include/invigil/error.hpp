#pragma once

#include <stdexcept>
#include <string>

namespace invigil {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents that do not fit the operation.
class ShapeError : public Error {
public:
  using Error::Error;
};

/// An operation produced NaN or Inf.
class NumericError : public Error {
public:
  using Error::Error;
};

class ConfigError : public Error {
public:
  using Error::Error;
};

class CheckpointError : public Error {
public:
  using Error::Error;
};

class KeypointParseError : public Error {
public:
  using Error::Error;
};

class ImageError : public Error {
public:
  using Error::Error;
};

class ManifestError : public Error {
public:
  using Error::Error;
};

class TrainingError : public Error {
public:
  using Error::Error;
};

} // namespace invigil
