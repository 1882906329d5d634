#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace genood {

// Base of every anticipated failure. The CLI maps these to exit status 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// EDF1 decoding failures. Each condition has its own type so callers can
// distinguish a foreign file from a damaged one.
class FormatError : public Error {
 public:
  using Error::Error;
};
class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};
class VersionMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};
class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};
class InconsistentDumpError : public FormatError {
 public:
  using FormatError::FormatError;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

class CollisionError : public Error {
 public:
  explicit CollisionError(std::vector<std::vector<std::string>> groups);
  const std::vector<std::vector<std::string>>& groups() const {
    return groups_;
  }

 private:
  std::vector<std::vector<std::string>> groups_;
};

class DegenerateFitError : public Error {
 public:
  using Error::Error;
};

class FactorizationError : public Error {
 public:
  using Error::Error;
};

class ZeroVectorError : public Error {
 public:
  using Error::Error;
};

class MissingLogitsError : public Error {
 public:
  using Error::Error;
};

class ContextOverflowError : public Error {
 public:
  using Error::Error;
};

class EmptyInputError : public Error {
 public:
  using Error::Error;
};

}  // namespace genood
