#pragma once

#include <stdexcept>
#include <string>

namespace catair {

// Error taxonomy. UsageError maps to CLI exit code 1, everything else to 2.
struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

struct TrainingDiverged : std::runtime_error {
    explicit TrainingDiverged(const std::string& msg) : std::runtime_error(msg) {}
};

using Real = double;

inline int ceil_div(int a, int b) { return (a + b - 1) / b; }

}  // namespace catair
