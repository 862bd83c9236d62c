#pragma once

#include <stdexcept>
#include <string>

namespace kdlab {

/// Incompatible tensor extents. The message names the offending shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Operand outside the domain of an operation (log of a non-positive value,
/// division by zero, non-finite result).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Malformed or inconsistent experiment configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed on-disk data (IDX, checkpoint, CSV tables).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace kdlab
