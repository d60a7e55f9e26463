#pragma once

#include <stdexcept>
#include <string>

namespace xmk {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent configuration (CLI exit code 2).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// An input artifact (file, directory) does not exist (CLI exit code 3).
class MissingArtifact : public Error {
public:
    using Error::Error;
};

/// An artifact exists but does not follow its on-disk schema.
class FormatError : public Error {
public:
    using Error::Error;
};

}  // namespace xmk
