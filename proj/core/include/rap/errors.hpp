#pragma once

#include <stdexcept>
#include <string>

namespace rap {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// A requested evaluation or integration window falls outside the grid span.
class SpanError : public Error {
public:
  using Error::Error;
};

/// Adaptive step control drove the step size below representable resolution.
class StiffnessError : public Error {
public:
  StiffnessError(const std::string& msg, double t_fail) : Error(msg), t(t_fail) {}
  double t;
};

/// A precondition stated by a solver contract was violated.
class PreconditionError : public Error {
public:
  using Error::Error;
};

/// A quantified hypothesis check failed and the caller asked for enforcement.
class HypothesisError : public Error {
public:
  using Error::Error;
};

/// Fixed-point iteration diverged or left its invariant ball.
class ConvergenceError : public Error {
public:
  using Error::Error;
};

/// Malformed input file or config.
class ParseError : public Error {
public:
  using Error::Error;
};

}  // namespace rap
