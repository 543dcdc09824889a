#pragma once

#include <stdexcept>
#include <string>

namespace vx {

// Error categories map to CLI exit codes: check failures -> 1,
// usage/config problems -> 2, I/O and file-format problems -> 3.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct CheckError : Error {
    explicit CheckError(const std::string& msg) : Error(msg) {}
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

// Malformed file contents (bad sizes, bad schema) as opposed to unreadable paths.
struct FormatError : IoError {
    explicit FormatError(const std::string& msg) : IoError(msg) {}
};

inline int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return 2;
    if (dynamic_cast<const IoError*>(&e)) return 3;
    return 1;
}

}  // namespace vx
