// Copyright 2026 The Linex Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace linex {

inline constexpr const char* kToolVersion = "0.1.0";

// Bad user input: malformed configs, missing files, invalid flags. CLI exit 2.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed on-disk payloads: bad magic, truncated files, ragged CSV rows.
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values or degenerate numerics. CLI exit 3.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Filesystem failures, always with path context.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace linex
