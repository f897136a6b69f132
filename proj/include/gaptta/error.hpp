#pragma once

#include <stdexcept>
#include <string>

namespace gaptta {

enum class ErrorKind {
    InvalidArgument,
    Shape,
    NonFinite,
    Format,
    Version,
    Truncated,
    Length,
    Unsupported,
    Io,
    Config,
    Dimension,
};

const char* to_string(ErrorKind kind) noexcept;

/// Error raised by every module of the library. The kind is stable and is
/// mapped one-to-one onto the status codes of the C API.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
    throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
    if (!condition) fail(kind, message);
}

}  // namespace gaptta
