#pragma once

#include <stdexcept>
#include <string>

namespace dslbi {

/// Raised when a loss or gradient leaves the finite range; training aborts instead of clipping.
class NonFiniteError : public std::runtime_error {
 public:
  explicit NonFiniteError(const std::string& what) : std::runtime_error(what) {}
};

/// Raised by the convergence monitor when a checked inequality fails beyond slack.
class VerificationError : public std::runtime_error {
 public:
  explicit VerificationError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace dslbi
