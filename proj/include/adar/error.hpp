#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace adar {

// Every failure raised by the library derives from Error so callers can
// map categories to exit codes without string matching.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class EmptyDatasetError : public Error {
 public:
  using Error::Error;
};

// Binary framing problems: bad magic, unsupported version, truncation.
class FormatError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Non-finite values detected during optimization.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// The user has interacted with every item; no negative exists.
class ExhaustedError : public Error {
 public:
  using Error::Error;
};

// The expected score never dropped below the negative threshold.
class NoTransitionError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace adar
