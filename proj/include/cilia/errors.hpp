#pragma once

#include <stdexcept>
#include <string>

namespace cilia {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor or raster extents that do not fit together.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Malformed, truncated or otherwise unreadable file content.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Input data that is well-formed but semantically unusable
/// (duplicate ids, degenerate folds, too few frames, ...).
class DataError : public Error {
public:
    using Error::Error;
};

/// Bad configuration keys or values.
class ConfigError : public Error {
public:
    using Error::Error;
};

}  // namespace cilia
