#pragma once

#include <stdexcept>
#include <string>

namespace ovvad {

// Exit codes used by the command-line front end. Every library error maps to
// exactly one of them.
enum class ExitCode : int {
  kOk = 0,
  kUsage = 1,
  kData = 2,
  kNumerical = 3,
};

class Error : public std::runtime_error {
 public:
  Error(ExitCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ExitCode code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

// Incompatible operand shapes.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(ExitCode::kUsage, "shape error: " + what) {}
};

// Invalid hyper-parameter or configuration value.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ExitCode::kUsage, "config error: " + what) {}
};

// Malformed or missing input file.
class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ExitCode::kData, "data error: " + what) {}
};

// Non-finite values, divergence, or failed gradient verification.
class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what)
      : Error(ExitCode::kNumerical, "numerical error: " + what) {}
};

// A metric that is not defined for its input (e.g. AUC with one class).
class UndefinedMetricError : public Error {
 public:
  explicit UndefinedMetricError(const std::string& what)
      : Error(ExitCode::kData, "undefined metric: " + what) {}
};

}  // namespace ovvad
