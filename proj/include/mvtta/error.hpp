#pragma once

#include <stdexcept>
#include <string>

namespace mvtta {

/// Base class of every error raised by the engine.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Input data violates a type invariant or an operation precondition.
class ValidationError : public Error {
public:
  using Error::Error;
};

/// The record lacks the data a metric needs (mc_logits, grad_l1).
class MetricUnavailable : public Error {
public:
  using Error::Error;
};

/// File could not be read, written, or parsed.
class IoError : public Error {
public:
  using Error::Error;
};

} // namespace mvtta
