#pragma once

#include <stdexcept>
#include <string>

namespace siban {

// Incompatible tensor shapes, channel counts or spatial sizes.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// A primitive was asked to leave its numeric domain (log of non-positive
// values, overflow to Inf, NaN losses).
struct NumericError : std::domain_error {
  using std::domain_error::domain_error;
};

// Misuse of the gradient tape (non-scalar loss, double backward).
struct TapeError : std::logic_error {
  using std::logic_error::logic_error;
};

// Invalid configuration values or arguments.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Malformed or incompatible files on disk.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Access that the dataset split policy forbids (target-train labels).
struct PolicyError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace siban
