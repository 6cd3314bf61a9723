// Copyright 2025 the minidino authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace minidino {

// Dimension/shape violations (exit code 2 when they escape the CLI).
struct ShapeError : std::invalid_argument {
  explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Bad configuration: unknown keys, invalid values, strategy/parameter
// mismatches (exit code 2).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// NaN/Inf detected in a computation (exit code 3).
struct NumericFault : std::runtime_error {
  explicit NumericFault(const std::string& msg) : std::runtime_error(msg) {}
};

// Phase-ordering violations: refining without a source checkpoint, cyclic
// lineage, incompatible parent phase (exit code 4).
struct LineageError : std::runtime_error {
  explicit LineageError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace minidino
