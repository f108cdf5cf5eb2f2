#pragma once

#include <stdexcept>
#include <string>

namespace lpa {

// Shape mismatch between tensors participating in one operation.
struct DimensionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid static configuration: sizes, strides, hyperparameters.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Data that parses but violates a contract (duplicate names, non-normalized
// distributions, checkpoint/category mismatches).
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed file contents.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// API misuse: non-scalar backward root, missing required argument.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Filesystem failure, reported with the offending path.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Scene placement failure in the synthetic generator.
struct GenerationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace lpa
