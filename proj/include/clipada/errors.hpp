// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace clipada {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor or image dimensions do not line up.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Malformed, missing or incompatible configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Dataset layout, index or image loading problems.
class DataError : public Error {
public:
    using Error::Error;
};

/// Tokenization failures and context-length overflow.
class TokenizerError : public Error {
public:
    using Error::Error;
};

/// Checkpoint / weight file could not be read or does not match.
class CheckpointError : public Error {
public:
    using Error::Error;
};

/// Training diverged (non-finite loss) or some other runtime failure.
class RuntimeFailure : public Error {
public:
    using Error::Error;
};

} // namespace clipada
