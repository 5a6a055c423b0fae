#pragma once

#include <stdexcept>
#include <string>

namespace xfic {

/// Broad failure classes. Each maps onto one CLI exit code.
enum class ErrorKind {
  Usage,      // bad arguments, config violations, insufficient warm-up data
  Format,     // I/O failures, corrupt or inconsistent files
  Numerical,  // solver non-convergence, degenerate numerics
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct UsageError : Error {
  explicit UsageError(const std::string& what) : Error(ErrorKind::Usage, what) {}
};

struct InsufficientWarmupError : Error {
  explicit InsufficientWarmupError(const std::string& what)
      : Error(ErrorKind::Usage, "insufficient warm-up: " + what) {}
};

struct StateError : Error {
  explicit StateError(const std::string& what) : Error(ErrorKind::Usage, "state error: " + what) {}
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& what) : Error(ErrorKind::Usage, "shape error: " + what) {}
};

/// Metric is mathematically undefined for the input (e.g. AUROC with one class).
struct UndefinedMetricError : Error {
  explicit UndefinedMetricError(const std::string& what)
      : Error(ErrorKind::Usage, "undefined metric: " + what) {}
};

struct FormatError : Error {
  explicit FormatError(const std::string& what) : Error(ErrorKind::Format, what) {}
};

/// Zero or non-finite vector where a direction is required. Treated as corrupt input.
struct DegenerateVectorError : Error {
  explicit DegenerateVectorError(const std::string& what)
      : Error(ErrorKind::Format, "degenerate vector: " + what) {}
};

struct NumericalError : Error {
  explicit NumericalError(const std::string& what) : Error(ErrorKind::Numerical, what) {}
};

inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Usage: return 1;
    case ErrorKind::Format: return 2;
    case ErrorKind::Numerical: return 3;
  }
  return 1;
}

}  // namespace xfic
