#pragma once

#include <cstdint>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace hyperfusion {

/// Tensor dimensions, outermost first.
using Shape = std::vector<std::size_t>;

inline std::string shape_string(std::span<const std::size_t> dims) {
  std::ostringstream oss;
  oss << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) oss << 'x';
    oss << dims[i];
  }
  oss << ']';
  return oss.str();
}

// Shapes of operands are incompatible.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A hyperparameter or configuration value is out of range.
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Caller violated an operation precondition (e.g. backward on a non-scalar).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Missing or unusable input data (empty manifest, missing map file...).
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed file content. `offset` is the byte position where parsing failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"), message_(what), offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }
  const std::string& message() const noexcept { return message_; }

 private:
  std::string message_;
  std::uint64_t offset_;
};

// A non-finite value surfaced during training.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

[[noreturn]] inline void shape_fail(const std::string& op, std::span<const std::size_t> a,
                                    std::span<const std::size_t> b, const std::string& why = {}) {
  std::string msg = op + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b);
  if (!why.empty()) msg += " (" + why + ")";
  throw ShapeError(msg);
}

}  // namespace detail
}  // namespace hyperfusion
