#pragma once

#include <stdexcept>
#include <string>

namespace kstl {

/// Base of every error raised by the library. The category is a short
/// machine-parsable token (the CLI prints it verbatim before the message).
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& message)
      : std::runtime_error(message), category_(std::move(category)) {}

  const std::string& category() const noexcept { return category_; }

 private:
  std::string category_;
};

/// Invalid configuration: shape mismatches, illegal hyperparameters.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& m) : Error("config", m) {}
};

/// Bad input data: unknown class keys, duplicate ids, unreadable rasters.
class DataError : public Error {
 public:
  explicit DataError(const std::string& m) : Error("data", m) {}
};

/// API misuse, e.g. backward() before forward().
class UsageError : public Error {
 public:
  explicit UsageError(const std::string& m) : Error("usage", m) {}
};

/// NaN/Inf produced by a numeric operation.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& m) : Error("numeric", m) {}
};

/// A stage hand-off violated its contract (e.g. HoTL adding layers).
class StageContractError : public Error {
 public:
  explicit StageContractError(const std::string& m) : Error("stage-contract", m) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& m) : Error("io", m) {}
};

}  // namespace kstl
