#pragma once

#include <stdexcept>
#include <string>

namespace refine3d {

// Shape/extent violations: mismatched operands, impossible output sizes,
// empty input sets.
class DimensionError : public std::invalid_argument {
public:
    explicit DimensionError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Invalid model/run configuration (bad preset values, checkpoint built for a
// different config).
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed on-disk data: binvox/PNG/checkpoint/CSV parse failures.
class FormatError : public std::runtime_error {
public:
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem trouble: unopenable paths, failed writes or renames.
class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// API misuse or phase-order violations: double backward, phase 3 before 1.
class StateError : public std::logic_error {
public:
    explicit StateError(const std::string& msg) : std::logic_error(msg) {}
};

// Non-finite values where finite ones are required (NaN loss aborts).
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace refine3d
