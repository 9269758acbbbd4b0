#pragma once

#include <stdexcept>
#include <string>

namespace lsa {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Problems with the input data or files (bad CSV, failed validation, I/O).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Numerical failures (non-PD covariance, failed inner optimization, ...).
class NumericalError : public Error {
 public:
  using Error::Error;
};

class OrderingViolation : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

class NonPdCovariance : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class InvalidSimplex : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class EmptyData : public DataError {
 public:
  using DataError::DataError;
};

class AllZeroRow : public DataError {
 public:
  using DataError::DataError;
};

class InnerOptFailure : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class NoValidRestart : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class DegenerateGrid : public Error {
 public:
  using Error::Error;
};

class InsufficientDataPerFold : public DataError {
 public:
  using DataError::DataError;
};

class VersionMismatch : public DataError {
 public:
  using DataError::DataError;
};

class IoError : public DataError {
 public:
  using DataError::DataError;
};

class UnknownEnumValue : public DataError {
 public:
  UnknownEnumValue(std::size_t row, std::string column, const std::string& value)
      : DataError("row " + std::to_string(row) + ", column '" + column +
                  "': unknown value '" + value + "'"),
        row_(row),
        column_(std::move(column)) {}

  std::size_t row() const noexcept { return row_; }
  const std::string& column() const noexcept { return column_; }

 private:
  std::size_t row_;
  std::string column_;
};

class ParseError : public DataError {
 public:
  ParseError(std::size_t row, std::string column, const std::string& reason)
      : DataError("row " + std::to_string(row) +
                  (column.empty() ? std::string{} : ", column '" + column + "'") +
                  ": " + reason),
        row_(row),
        column_(std::move(column)) {}

  std::size_t row() const noexcept { return row_; }
  const std::string& column() const noexcept { return column_; }

 private:
  std::size_t row_;
  std::string column_;
};

}  // namespace lsa
