#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace esrs {

/// Base of every error raised by the library. `kind()` is a stable,
/// machine-parseable tag used by the command-line front end.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& m) : Error("dimension", m) {}
};

class DegenerateMaskError : public Error {
 public:
  explicit DegenerateMaskError(const std::string& m) : Error("degenerate_mask", m) {}
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& m) : Error("contract", m) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& m) : Error("io", m) {}
};

class EmptyTableError : public Error {
 public:
  explicit EmptyTableError(const std::string& m) : Error("empty_table", m) {}
};

class InsufficientPoolError : public Error {
 public:
  explicit InsufficientPoolError(const std::string& m) : Error("insufficient_pool", m) {}
};

class ParseError : public Error {
 public:
  ParseError(const std::string& m, std::size_t line)
      : Error("parse", m + " (line " + std::to_string(line) + ")"), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class FormatError : public Error {
 public:
  FormatError(const std::string& m, std::size_t offset)
      : Error("format", m + " (offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& m) : Error("config", m) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& m) : Error("numeric", m) {}
};

}  // namespace esrs
