#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace frommerge {

// Base of every error the library throws. The CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad arguments, mismatched layer sets, invalid configs. Exit code 1.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Operand shape mismatch in a tensor operation.
class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// File system failures. Exit code 2.
class IoError : public Error {
 public:
  using Error::Error;
};

// Malformed container or sidecar. Carries the byte offset where parsing failed.
class ParseError : public IoError {
 public:
  ParseError(const std::string& what, std::uint64_t offset)
      : IoError(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

// SVD non-convergence or non-finite intermediates. Exit code 3.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace frommerge
