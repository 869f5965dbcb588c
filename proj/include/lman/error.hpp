#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace lman {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input record. Carries the 1-based line number.
class ParseError : public Error {
public:
    ParseError(std::size_t line, const std::string& what)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// A value was well-formed but not acceptable (non-finite coordinate, ...).
class RejectionError : public Error {
public:
    RejectionError(std::size_t line, const std::string& what)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
    explicit RejectionError(const std::string& what) : Error(what), line_(0) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// Stored data is inconsistent (frame gaps, bad checksum, truncated file).
class IntegrityError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration or a violated caller-side precondition on config.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Shapes or lengths that do not line up.
class StructuralError : public Error {
public:
    using Error::Error;
};

/// A numeric contract was broken (e.g. a feature that should be unit-norm).
class ContractError : public Error {
public:
    using Error::Error;
};

/// Checkpoint written by an unsupported format version.
class MigrationError : public Error {
public:
    using Error::Error;
};

/// The memory queue holds no slots.
class EmptyMemoryError : public Error {
public:
    using Error::Error;
};

/// Training produced a non-finite loss.
class NumericError : public Error {
public:
    using Error::Error;
};

}  // namespace lman
