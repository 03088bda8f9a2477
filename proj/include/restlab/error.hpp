#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace restlab {

enum class ErrorCode {
  kConfig,        // invalid configuration or unmet precondition
  kData,          // missing/corrupt files, shape mismatches on inputs
  kNumerical,     // NaN/Inf, unusable trained model
  kState,         // API misuse (double backward, missing grad)
};

/// Exit code used by the command-line front end for each error class.
inline int exit_code(ErrorCode code) {
  switch (code) {
    case ErrorCode::kConfig: return 2;
    case ErrorCode::kData: return 3;
    case ErrorCode::kNumerical: return 4;
    case ErrorCode::kState: return 1;
  }
  return 1;
}

inline std::string_view code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kConfig: return "E_CONFIG";
    case ErrorCode::kData: return "E_DATA";
    case ErrorCode::kNumerical: return "E_NUMERICAL";
    case ErrorCode::kState: return "E_STATE";
  }
  return "E_UNKNOWN";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorCode::kConfig, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorCode::kData, what) {}
};

class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what) : Error(ErrorCode::kNumerical, what) {}
};

class StateError : public Error {
 public:
  explicit StateError(const std::string& what) : Error(ErrorCode::kState, what) {}
};

}  // namespace restlab
