#pragma once

#include <stdexcept>
#include <string>

namespace cellret {

// Failure categories. Each maps to a distinct process exit code in the CLI.
enum class ErrorKind {
  kInvalidArgument,
  kConfig,
  kData,
  kNumeric,
  kCapacity,
  kIo,
};

inline const char* error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidArgument: return "invalid-argument";
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kData: return "data";
    case ErrorKind::kNumeric: return "numeric";
    case ErrorKind::kCapacity: return "capacity";
    case ErrorKind::kIo: return "io";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(error_kind_name(kind)) + ": " + what),
        kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig: return 2;
    case ErrorKind::kData: return 3;
    case ErrorKind::kNumeric: return 4;
    case ErrorKind::kCapacity: return 5;
    case ErrorKind::kIo: return 6;
    case ErrorKind::kInvalidArgument: return 7;
  }
  return 1;
}

}  // namespace cellret
