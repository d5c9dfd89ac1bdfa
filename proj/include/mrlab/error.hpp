#pragma once

#include <stdexcept>
#include <string>

namespace mrlab {

// Base class for all library errors. Subcommands map these to exit codes.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape or argument violations detected before computing anything.
class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// NaN/Inf produced by a primitive, divergence during training, etc.
class NumericError : public Error {
public:
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

// Missing files, malformed checkpoints, lock contention.
class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error(msg) {}
};

// Bad configuration values (maps to CLI exit code 2).
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

} // namespace mrlab
