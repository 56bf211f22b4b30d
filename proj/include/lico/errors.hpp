#pragma once

#include <stdexcept>
#include <string>

namespace lico {

/// Operand extents do not fit the operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Argument value outside the operation's domain (bad label, tau <= 0, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Caller broke an API contract (non-scalar loss, non-bijective permutation, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A loss or intermediate value became non-finite.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed file or unreadable path.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Run configuration rejected (unknown key, bad value, unusable path).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace lico
