#pragma once

#include <stdexcept>
#include <string>

namespace pertrace {

/// Base of every error the toolkit throws.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad or inconsistent configuration (CLI exit code 2).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed input data: checkpoints, corpora, prompt pairs (CLI exit code 3).
class DataError : public Error {
public:
    using Error::Error;
};

/// Tensor shape or index violation.
class ShapeError : public DataError {
public:
    using DataError::DataError;
};

/// Numerical precondition failure (non-finite values, zero vectors).
class NumericError : public Error {
public:
    using Error::Error;
};

} // namespace pertrace
