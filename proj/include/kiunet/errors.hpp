#pragma once

#include <stdexcept>
#include <string>

namespace kiunet {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Incompatible tensor or spatial shapes.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// NaN/Inf produced or detected where finite values are required.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration value or CLI usage.
class ConfigError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// File ended before the record it announced was complete.
class TruncatedFileError : public IoError {
public:
    using IoError::IoError;
};

/// Structurally malformed file contents.
class FormatError : public Error {
public:
    using Error::Error;
};

class BadMagicError : public FormatError {
public:
    using FormatError::FormatError;
};

class UnsupportedVersionError : public FormatError {
public:
    using FormatError::FormatError;
};

/// Checkpoint entries do not match the parameter registry of the target network.
class ParameterMismatchError : public Error {
public:
    using Error::Error;
};

class NonBinaryMaskError : public Error {
public:
    using Error::Error;
};

/// Synthetic sample could not be laid out within the attempt budget.
class GenerationError : public Error {
public:
    using Error::Error;
};

}  // namespace kiunet
