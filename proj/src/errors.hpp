#pragma once

#include <stdexcept>
#include <string>

namespace tabdl {

enum class ErrorKind {
    Config,       // bad user configuration / arguments
    Shape,        // tensor shape violation
    Contract,     // API precondition violation
    Io,           // file system / parse failures
    Numeric,      // NaN/Inf or numerical breakdown
    Unsupported,  // valid request, not applicable to this object
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
    throw Error(kind, message);
}

}  // namespace tabdl
