#pragma once

#include <stdexcept>
#include <string>

namespace osuda {

// Base for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller asked for something the object does not support (e.g. a style
// encoder on a shared-encoder augmenter).
class UsageError : public Error {
 public:
  using Error::Error;
};

// Input values violate a documented precondition.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Tensor shapes are incompatible.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Missing or unreadable/unwritable filesystem path.
class PathError : public Error {
 public:
  using Error::Error;
};

// Invalid run configuration (unknown key, unparsable value, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Corrupt or incompatible checkpoint / weight container.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

// A loss became non-finite during training.
class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

}  // namespace osuda
