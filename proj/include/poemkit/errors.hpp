#pragma once

#include <stdexcept>
#include <string>

namespace poemkit {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand extents do not compose.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A numerical problem without a well-posed answer (parallel rays, zero
/// variance, empty heatmap, ...).
class DegenerateError : public Error {
 public:
  using Error::Error;
};

/// Filesystem or serialization failure.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Configuration or checkpoint incompatible with the request.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace poemkit
