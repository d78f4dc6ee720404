#pragma once

#include <stdexcept>
#include <string>

namespace pullback {

// Operand lengths or shapes disagree.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// NaN/Inf where a finite value is required.
class NumericError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Argument outside the mathematical domain of the operation
// (nonpositive loss under the log embedding, non-SPD metric, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Invalid configuration or API misuse (unknown names, stale caches,
// optimizer state that does not match the optimizer kind).
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace pullback
