// Copyright Contributors to the refsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace refsplat {

/// Broad failure category. The CLI maps these onto exit codes.
enum class ErrorKind {
    Config,       // bad or unknown configuration values
    Data,         // malformed or inconsistent input data
    Numerical,    // NaN, degenerate geometry, insufficient samples
    InvalidState, // API misuse such as a stale autodiff tape
    Range,        // argument outside its documented domain
};

class Error : public std::runtime_error {
  public:
    Error(ErrorKind kind, const std::string &what) : std::runtime_error(what), mKind(kind) {}

    ErrorKind
    kind() const noexcept {
        return mKind;
    }

  private:
    ErrorKind mKind;
};

struct ConfigError : Error {
    explicit ConfigError(const std::string &what) : Error(ErrorKind::Config, what) {}
};

/// Data errors carry the offending file and field so callers can report both.
struct DataError : Error {
    DataError(const std::string &path, const std::string &field, const std::string &what)
        : Error(ErrorKind::Data, path + ": " + field + ": " + what), path(path), field(field) {}
    std::string path;
    std::string field;
};

struct NumericalError : Error {
    explicit NumericalError(const std::string &what) : Error(ErrorKind::Numerical, what) {}
};

struct InvalidStateError : Error {
    explicit InvalidStateError(const std::string &what) : Error(ErrorKind::InvalidState, what) {}
};

struct RangeError : Error {
    explicit RangeError(const std::string &what) : Error(ErrorKind::Range, what) {}
};

} // namespace refsplat
