#pragma once

#include <stdexcept>
#include <string>

namespace pvit {

/// Tensor shapes that do not fit an operation, or an out-of-range index.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Misuse of the gradient tape (double backward, detached or non-scalar root).
class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Malformed or inconsistent file content (IDX, logits files, checkpoints).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A sample has no prior logits in the configured prior source.
class MissingPriorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss or gradient.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid run configuration (unknown key, missing key, bad value).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace pvit
