#pragma once

#include <stdexcept>
#include <string>

namespace patgraph {

/// Base class of every exception thrown by the library. The CLI maps the
/// subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input record: bad JSON, missing field, wrong type.
class SchemaError : public Error {
 public:
  using Error::Error;
};

/// Well-formed input that violates a data invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Tensor or adjacency shape mismatch.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf produced by a numeric op or found in a gradient.
class NumericFault : public Error {
 public:
  using Error::Error;
};

/// Caller violated a documented precondition (bad config, wrong stage, ...).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// File missing or unreadable.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace patgraph
