#pragma once

#include <stdexcept>
#include <string>

namespace ccat {

// Error categories used across the library. All derive from ccat::Error so
// callers can catch the whole family or a specific kind.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape / size contract violations (mismatched dims, indivisible sizes).
struct DimensionError : Error {
    using Error::Error;
};

// Invalid argument values (temperature <= 0, empty lists, step out of range).
struct ParameterError : Error {
    using Error::Error;
};

// Invalid model/net configuration; message names the failing constraint.
struct ConfigError : Error {
    using Error::Error;
};

// Inconsistent mutable state (parameter name-set mismatch, missing image id).
struct StateError : Error {
    using Error::Error;
};

// Non-finite values where finite ones are required; message names the term.
struct NumericError : Error {
    using Error::Error;
};

// Bad dataset contents; message names the offending record.
struct DataError : Error {
    using Error::Error;
};

// Malformed persisted files (checkpoints, manifests, images).
struct FormatError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

}  // namespace ccat
