#pragma once

#include <stdexcept>
#include <string>

namespace m3d {

/// Error classes surfaced by every module. The CLI maps each category to an
/// exit code (usage 1, data 2, format 3, numerical 4).
enum class ErrorCategory { kUsage = 1, kData = 2, kFormat = 3, kNumerical = 4 };

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }
  int exit_code() const noexcept { return static_cast<int>(category_); }

 private:
  ErrorCategory category_;
};

struct UsageError : Error {
  explicit UsageError(const std::string& what) : Error(ErrorCategory::kUsage, what) {}
};

// Shape/extent mismatches and out-of-range parameters are caller mistakes.
struct DimensionError : UsageError {
  explicit DimensionError(const std::string& what) : UsageError("dimension error: " + what) {}
};

struct ParameterError : UsageError {
  explicit ParameterError(const std::string& what) : UsageError("parameter error: " + what) {}
};

struct ConfigError : UsageError {
  explicit ConfigError(const std::string& what) : UsageError("configuration error: " + what) {}
};

struct DataError : Error {
  explicit DataError(const std::string& what) : Error(ErrorCategory::kData, "data error: " + what) {}
};

struct FormatError : Error {
  explicit FormatError(const std::string& what)
      : Error(ErrorCategory::kFormat, "format error: " + what) {}
};

struct NumericalError : Error {
  explicit NumericalError(const std::string& what)
      : Error(ErrorCategory::kNumerical, "numerical error: " + what) {}
};

}  // namespace m3d
