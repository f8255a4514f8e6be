#pragma once

#include <stdexcept>
#include <string>

namespace cal {

// Thrown when a config or argument violates a documented constraint
// (bad layer index, overlapping partition, odd RevNet width, ...).
struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Thrown when a referenced file or checkpoint is absent or malformed.
struct ArtifactError : std::runtime_error {
    explicit ArtifactError(const std::string& msg) : std::runtime_error(msg) {}
};

// Thrown when an enumeration or search exceeds its configured budget.
struct BudgetError : std::runtime_error {
    explicit BudgetError(const std::string& msg) : std::runtime_error(msg) {}
};

// Thrown by gauss_solve when a pivot falls below the singularity threshold.
struct SingularMatrixError : std::runtime_error {
    explicit SingularMatrixError(const std::string& msg) : std::runtime_error(msg) {}
};

// Thrown when a verified-exact property fails at runtime (non-finite loss,
// assumption check failure in the vacuity construction, ...).
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace cal
