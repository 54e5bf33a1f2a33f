#pragma once

#include <stdexcept>
#include <string>

namespace sonoqa {

// Failure categories map onto CLI exit codes: usage 1, data/I-O 2, numerical 3.
enum class ErrorKind { kUsage, kData, kNumerical };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// Non-conforming tensor shapes.
struct DimensionError : Error {
  explicit DimensionError(const std::string& w) : Error(ErrorKind::kNumerical, "dimension error: " + w) {}
};

// API misuse, e.g. backward on a non-scalar.
struct ContractError : Error {
  explicit ContractError(const std::string& w) : Error(ErrorKind::kNumerical, "contract error: " + w) {}
};

// NaN/Inf produced by an operation, or training divergence.
struct NumericalError : Error {
  explicit NumericalError(const std::string& w) : Error(ErrorKind::kNumerical, "numerical error: " + w) {}
};

// Invalid configuration or parameter values.
struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error(ErrorKind::kUsage, "config error: " + w) {}
};

// Bad input data (undersized images, empty samples, ...).
struct InputError : Error {
  explicit InputError(const std::string& w) : Error(ErrorKind::kData, "input error: " + w) {}
};

struct IoError : Error {
  explicit IoError(const std::string& w) : Error(ErrorKind::kData, "I/O error: " + w) {}
};

inline int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::kUsage: return 1;
    case ErrorKind::kData: return 2;
    case ErrorKind::kNumerical: return 3;
  }
  return 3;
}

}  // namespace sonoqa
