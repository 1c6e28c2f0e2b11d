#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mintnet {

// Operand shapes are incompatible for the requested operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A run or model configuration failed validation.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Filesystem access failed (open, read, write).
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// An iterative procedure produced non-finite values or lost its preconditions.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::size_t iteration)
      : std::runtime_error(what), iteration_(iteration) {}
  std::size_t iteration() const { return iteration_; }

 private:
  std::size_t iteration_;
};

}  // namespace mintnet
