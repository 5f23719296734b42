#pragma once

#include <stdexcept>
#include <string>

namespace dmseg {

// Malformed or inconsistent arguments (shape mismatch, out-of-range label...).
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A convolution or resampling specification that cannot produce an output.
class InvalidSpec : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// API misuse, e.g. backward() on a tensor that is not part of a graph.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Corrupt or truncated file contents.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Valid file using a feature this library does not read.
class UnsupportedFeature : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Checkpoint written by a different format version.
class VersionMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training produced a NaN/Inf loss.
class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw InvalidInput(what);
}

}  // namespace detail
}  // namespace dmseg
