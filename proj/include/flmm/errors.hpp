#pragma once

#include <stdexcept>
#include <string>

namespace flmm {

/// Base class for all errors raised by this library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Invalid construction parameters (bad spline order, negative knot count, ...).
class InvalidConfigError : public Error {
public:
    using Error::Error;
};

/// Argument outside its mathematical domain (t outside [0,1], nonpositive variance, ...).
class DomainError : public Error {
public:
    using Error::Error;
};

/// CSV header does not match the expected column layout.
class SchemaError : public Error {
public:
    using Error::Error;
};

/// A cell could not be parsed as a number.
class ParseError : public Error {
public:
    using Error::Error;
};

/// Vector/matrix dimensions do not line up.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A prediction target touches more subjects than the sparse-target contract allows.
class SparsityError : public Error {
public:
    using Error::Error;
};

/// Random-effect covariance not invertible even after eigenvalue repair.
class IllConditionedError : public Error {
public:
    using Error::Error;
};

/// Penalized normal matrix is numerically singular.
class RankDeficiencyError : public Error {
public:
    using Error::Error;
};

/// Variance estimating equation has no sign change on the (expanded) bracket.
class RootBracketError : public Error {
public:
    using Error::Error;
};

/// Closed-form smoothing update has a zero or undefined denominator.
class DegenerateSmoothingError : public Error {
public:
    using Error::Error;
};

/// Generic numerical failure (indefinite matrix, step underflow, ...).
class NumericalError : public Error {
public:
    using Error::Error;
};

/// Model archive and requested configuration disagree.
class CompatibilityError : public Error {
public:
    using Error::Error;
};

/// Estimated MSE negative beyond numerical slack.
class InvalidMseError : public Error {
public:
    using Error::Error;
};

/// Iterative fit did not reach tolerance within the iteration cap.
/// Carries the last parameter deltas so the failure is inspectable.
class ConvergenceError : public Error {
public:
    ConvergenceError(const std::string& msg, int iterations, double lastDelta)
        : Error(msg), iterations(iterations), lastDelta(lastDelta) {}
    int iterations;
    double lastDelta;
};

} // namespace flmm
