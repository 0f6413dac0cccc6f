#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace gradleak {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Sliding-window geometry does not produce an integral output size.
class GeometryError : public Error {
public:
    using Error::Error;
};

/// A value lies outside an operation's mathematical domain.
class DomainError : public Error {
public:
    using Error::Error;
};

/// Caller violated an operation's precondition.
class ContractError : public Error {
public:
    using Error::Error;
};

/// A graph node cannot be differentiated (no registered derivative).
class CapabilityError : public Error {
public:
    CapabilityError(std::string primitive)
        : Error("primitive '" + primitive + "' has no registered derivative"),
          primitive_(std::move(primitive)) {}

    const std::string& primitive() const noexcept { return primitive_; }

private:
    std::string primitive_;
};

/// A model specification is inconsistent.
class BuildError : public Error {
public:
    using Error::Error;
};

/// Two artifacts (bundle, model, params) cannot be combined.
class IncompatibleError : public Error {
public:
    using Error::Error;
};

/// A decision rule has no unique answer for the given evidence.
class AmbiguityError : public Error {
public:
    using Error::Error;
};

/// Malformed serialized input. Carries the byte offset where parsing stopped.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t offset)
        : Error(what + " (at byte offset " + std::to_string(offset) + ")"),
          offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

} // namespace gradleak
