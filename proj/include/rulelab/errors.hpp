#pragma once

#include <stdexcept>
#include <string>

namespace rulelab {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration or precondition on a configuration value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Argument outside an operation's domain.
class DomainError : public Error {
 public:
  using Error::Error;
};

// Sequence longer than the model context.
class LengthError : public Error {
 public:
  using Error::Error;
};

// Malformed, truncated or mismatched file.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Non-finite gradient, loss or parameter.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// Broken internal invariant (e.g. a shipped data file that fails its checks).
class InternalError : public Error {
 public:
  using Error::Error;
};

// Pretraining could not reach the probe gate within its epoch cap.
class PretrainError : public Error {
 public:
  using Error::Error;
};

// A pipeline stage was asked to run before its inputs exist.
class MissingPrerequisite : public Error {
 public:
  using Error::Error;
};

}  // namespace rulelab
