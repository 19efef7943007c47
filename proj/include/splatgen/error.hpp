#pragma once

#include <stdexcept>
#include <string>

namespace splatgen {

// Error classes map 1:1 to CLI exit codes.
enum class ErrorCode : int {
    generic = 1,
    argument = 2,
    io = 3,
    checkpoint = 4,
    manifest = 5,
    numeric = 6,
};

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
    ErrorCode code() const { return code_; }
    int exit_code() const { return static_cast<int>(code_); }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

}  // namespace splatgen
