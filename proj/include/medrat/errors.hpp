#pragma once

#include <stdexcept>
#include <string>

namespace medrat {

/// Invalid configuration value or schema violation. Maps to CLI exit code 1.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input data (shape mismatch, out-of-range token, bad file).
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Numerical failure during optimization (non-finite loss component).
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace medrat
