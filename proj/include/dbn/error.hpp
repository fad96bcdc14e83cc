#pragma once

#include <stdexcept>
#include <string>

namespace dbn {

/// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Shape or extent mismatch between operands.
class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& msg) : Error("dimension error: " + msg) {}
};

/// Invalid value passed to an operation (bad distribution, bad range, ...).
class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& msg) : Error("validation error: " + msg) {}
};

/// API misuse (non-scalar loss, repeated backward, unknown mode string, ...).
class UsageError : public Error {
 public:
  explicit UsageError(const std::string& msg) : Error("usage error: " + msg) {}
};

/// File or stream failure.
class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error("io error: " + msg) {}
};

/// A token without a glyph was asked to be drawn.
class RenderError : public Error {
 public:
  explicit RenderError(const std::string& msg) : Error("render error: " + msg) {}
};

}  // namespace dbn
