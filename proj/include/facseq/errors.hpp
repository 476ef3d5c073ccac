#pragma once

#include <stdexcept>
#include <string>

namespace facseq {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes or dimensions that do not fit together.
class StructuralError : public Error {
 public:
  using Error::Error;
};

/// A non-finite value where a finite one is required. `tensor()` names the
/// offending quantity when known.
class NumericalError : public Error {
 public:
  NumericalError(const std::string& what, std::string tensor = {})
      : Error(tensor.empty() ? what : what + " [" + tensor + "]"),
        tensor_(std::move(tensor)) {}
  const std::string& tensor() const noexcept { return tensor_; }

 private:
  std::string tensor_;
};

/// Malformed file contents (bad magic, truncation, inconsistent header).
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Argument outside a function's mathematical domain.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Caller violated a documented precondition.
class PreconditionError : public Error {
 public:
  using Error::Error;
};

}  // namespace facseq
