#pragma once

#include <stdexcept>
#include <string>

namespace arcopo {

// Non-finite values or impossible numeric operations (e.g. a zero
// old-policy probability in a ratio).
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

struct NotFoundError : std::runtime_error {
    explicit NotFoundError(const std::string& what) : std::runtime_error(what) {}
};

// A computation requested a primitive the tape does not record.
struct UnsupportedOperation : std::runtime_error {
    explicit UnsupportedOperation(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace arcopo
