#pragma once

#include <stdexcept>
#include <string>

namespace blp {

/// Base of every error raised by the library. The CLI maps the concrete
/// subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Record or trajectory breaks a structural invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file; the message carries a line or record locus.
class ParseError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Tensor or parameter shapes disagree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Bad run configuration (unknown key, empty dataset request, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Not enough or unusable data for the requested operation.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values surfaced during training or optimization.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace blp
