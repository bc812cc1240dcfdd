#pragma once

#include <stdexcept>
#include <string>

namespace psd {

// Error categories map onto the CLI exit-code contract:
// usage -> 1, data -> 2, numeric/shape -> 3.
enum class ErrorKind { usage, data, numeric, shape };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error(ErrorKind::shape, msg) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& msg) : Error(ErrorKind::data, msg) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error(ErrorKind::numeric, msg) {}
};

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& msg) : Error(ErrorKind::usage, msg) {}
};

}  // namespace psd
