#pragma once

#include <stdexcept>
#include <string>

namespace relprobe {

// Base for every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Checkpoint, tokenizer or data file could not be read or validated.
class LoadError : public Error {
 public:
  using Error::Error;
};

// Tensor or sequence dimensions disagree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Input sequence longer than the model supports.
class LengthError : public Error {
 public:
  using Error::Error;
};

// Invalid template, experiment configuration or patch specification.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Two patches address the same activation cell with different modes.
class PatchConflictError : public Error {
 public:
  using Error::Error;
};

// A statistic is undefined for the given input (zero variance, empty set...).
class DomainError : public Error {
 public:
  using Error::Error;
};

}  // namespace relprobe
