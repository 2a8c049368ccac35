#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace sit {

// Error categories map one-to-one onto CLI exit codes (see tools/sit.cpp).
enum class ErrorKind {
  shape,
  parse,
  validation,
  structural,
  argument,
  resource_limit,
  state,
  numeric,
  io,
  configuration,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message);
  ErrorKind kind() const noexcept { return kind_; }
  /// The message without the kind prefix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorKind kind_;
  std::string detail_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& m) : Error(ErrorKind::shape, m) {}
};

class ParseError : public Error {
 public:
  ParseError(const std::string& m, std::size_t line);
  std::size_t line() const noexcept { return line_; }
  const std::string& reason() const noexcept { return reason_; }

 private:
  std::size_t line_;
  std::string reason_;
};

class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& m) : Error(ErrorKind::validation, m) {}
};

class StructuralError : public Error {
 public:
  explicit StructuralError(const std::string& m) : Error(ErrorKind::structural, m) {}
};

class ArgumentError : public Error {
 public:
  explicit ArgumentError(const std::string& m) : Error(ErrorKind::argument, m) {}
};

class ResourceLimitError : public Error {
 public:
  explicit ResourceLimitError(const std::string& m) : Error(ErrorKind::resource_limit, m) {}
};

class StateError : public Error {
 public:
  explicit StateError(const std::string& m) : Error(ErrorKind::state, m) {}
};

class NumericError : public Error {
 public:
  NumericError(const std::string& m, long iteration);
  long iteration() const noexcept { return iteration_; }

 private:
  long iteration_;
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& m) : Error(ErrorKind::io, m) {}
};

class ConfigurationError : public Error {
 public:
  explicit ConfigurationError(const std::string& m) : Error(ErrorKind::configuration, m) {}
};

}  // namespace sit
