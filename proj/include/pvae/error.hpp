#pragma once

#include <stdexcept>
#include <string>

namespace pvae {

/// Base for every error raised by the library. `kind()` is the short
/// machine-readable tag the CLI prints as its error prefix.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error("shape", what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error("numeric", what) {}
};

class RangeError : public Error {
 public:
  explicit RangeError(const std::string& what) : Error("range", what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("io", what) {}
};

class MagicError : public Error {
 public:
  explicit MagicError(const std::string& what) : Error("magic", what) {}
};

class TruncatedError : public Error {
 public:
  explicit TruncatedError(const std::string& what) : Error("truncated", what) {}
};

class VersionError : public Error {
 public:
  explicit VersionError(const std::string& what) : Error("version", what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config", what) {}
};

}  // namespace pvae
