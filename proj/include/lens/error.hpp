#pragma once

#include <stdexcept>
#include <string>

namespace lens {

/// Base for errors that carry a process exit status.
class Error : public std::runtime_error {
public:
    Error(const std::string& what, int exit_code)
        : std::runtime_error(what), exit_code_(exit_code) {}

    int exit_code() const noexcept { return exit_code_; }

private:
    int exit_code_;
};

class UsageError : public Error {
public:
    explicit UsageError(const std::string& what) : Error(what, 1) {}
};

/// Malformed or inconsistent input data (files, corpora, tensors).
class DataError : public Error {
public:
    explicit DataError(const std::string& what) : Error(what, 2) {}
};

/// Non-finite values or failed numeric invariants.
class NumericError : public Error {
public:
    explicit NumericError(const std::string& what) : Error(what, 3) {}
};

} // namespace lens
