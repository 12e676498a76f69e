#pragma once

#include <stdexcept>
#include <string>

namespace strategem {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Vector or matrix dimensions do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Cost matrix is not symmetric positive definite, or a solve against it failed.
class CostMatrixError : public Error {
 public:
  using Error::Error;
};

/// A parameter is outside its admissible range.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// The context normalizer of the corrected inner update vanished.
class DegenerateContextError : public Error {
 public:
  using Error::Error;
};

/// Tabular input lacks a required column or has no rows.
class SchemaError : public Error {
 public:
  using Error::Error;
};

/// A cell could not be parsed. Carries the 1-based data row and the column name.
class ParseError : public Error {
 public:
  ParseError(std::size_t row, std::string column, const std::string& what)
      : Error("row " + std::to_string(row) + ", column '" + column + "': " + what),
        row_(row),
        column_(std::move(column)) {}

  std::size_t row() const { return row_; }
  const std::string& column() const { return column_; }

 private:
  std::size_t row_;
  std::string column_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline void require_same_size(long a, long b, const char* what) {
  if (a != b) {
    throw ShapeError(std::string(what) + ": size " + std::to_string(a) +
                     " does not match " + std::to_string(b));
  }
}

}  // namespace detail
}  // namespace strategem
