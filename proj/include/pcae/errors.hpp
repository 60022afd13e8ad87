#pragma once

#include <stdexcept>
#include <string>

namespace pcae {

/// Shape or size disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A value outside the mathematical domain of an operation (log of 0, zero scale, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// API misuse: wrong mode, missing argument, empty input where one is required.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Invalid configuration (batch too small for batch norm, bad widths, ...).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// NaN or Inf produced where finite values are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or unreadable file (point cloud, checkpoint, manifest).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace pcae
