#pragma once

#include <stdexcept>
#include <string>

namespace fnk {

enum class ErrorKind {
  InvalidShape,
  InvalidArgument,
  ShapeMismatch,
  Config,
  State,
  Format,
  Numeric,
  Index,
  Validation,
};

inline const char* to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::InvalidShape: return "invalid-shape";
    case ErrorKind::InvalidArgument: return "invalid-argument";
    case ErrorKind::ShapeMismatch: return "shape";
    case ErrorKind::Config: return "config";
    case ErrorKind::State: return "state";
    case ErrorKind::Format: return "format";
    case ErrorKind::Numeric: return "numeric";
    case ErrorKind::Index: return "index";
    case ErrorKind::Validation: return "validation";
  }
  return "unknown";
}

/// Every failure raised by the library carries one of the kinds above so
/// callers (and the CLI exit-code mapping) can dispatch on it.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace fnk
