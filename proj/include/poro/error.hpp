#pragma once

#include <stdexcept>
#include <string>

namespace poro {

/// Base class for all domain errors raised by the toolkit.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Invalid configuration (generator, flow, training setup).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Invalid argument to an operation.
class ArgumentError : public Error {
public:
    using Error::Error;
};

/// Malformed or truncated on-disk format (VXG1, VXF1, PVK1, manifests).
class FormatError : public Error {
public:
    using Error::Error;
};

/// Filesystem failure (missing file, unwritable path).
class IoError : public Error {
public:
    using Error::Error;
};

/// Tensor shape mismatch; message names the primitive and both shapes.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Numerical blow-up (NaN/Inf populations, NaN loss).
class DivergenceError : public Error {
public:
    DivergenceError(const std::string& msg, long step) : Error(msg), step(step) {}
    long step = -1;
};

/// Iteration limit reached without meeting the tolerance.
class ConvergenceError : public Error {
public:
    ConvergenceError(const std::string& msg, long steps, double residual)
        : Error(msg), steps(steps), residual(residual) {}
    long steps = 0;
    double residual = 0.0;
};

/// No percolating pore path between inlet and outlet.
class ImpermeableError : public Error {
public:
    using Error::Error;
};

/// Darcy inversion produced a physically inconsistent result.
class InconsistentRunError : public Error {
public:
    using Error::Error;
};

/// Model missing required state (e.g. normalization bounds before predict).
class ModelStateError : public Error {
public:
    using Error::Error;
};

}  // namespace poro
