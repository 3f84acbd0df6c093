// Copyright 2026 The saedrift Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace saedrift {

enum class ErrorKind {
    config,
    missing_file,
    io,
    schema,
    shape,
    non_finite,
    hash_mismatch,
    invariant,
    misaligned,
    degenerate,
    non_convergence,
    network,
    retry_exhausted,
    internal,
};

inline std::string_view to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::config: return "config";
        case ErrorKind::missing_file: return "missing_file";
        case ErrorKind::io: return "io";
        case ErrorKind::schema: return "schema";
        case ErrorKind::shape: return "shape";
        case ErrorKind::non_finite: return "non_finite";
        case ErrorKind::hash_mismatch: return "hash_mismatch";
        case ErrorKind::invariant: return "invariant";
        case ErrorKind::misaligned: return "misaligned";
        case ErrorKind::degenerate: return "degenerate";
        case ErrorKind::non_convergence: return "non_convergence";
        case ErrorKind::network: return "network";
        case ErrorKind::retry_exhausted: return "retry_exhausted";
        case ErrorKind::internal: return "internal";
    }
    return "internal";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

// Process exit codes used by the command-line driver.
inline int exit_code(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::config: return 2;
        case ErrorKind::network:
        case ErrorKind::retry_exhausted: return 4;
        case ErrorKind::internal: return 5;
        default: return 3;
    }
}

}  // namespace saedrift
