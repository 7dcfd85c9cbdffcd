#pragma once

#include <stdexcept>
#include <string>

namespace akvq {

enum class ErrorKind {
  kFormat,
  kLength,
  kSize,
  kParameter,
  kNumeric,
  kShape,
  kState,
  kIo,
  kInput,
  kUndefinedMetric,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kFormat: return "format error";
    case ErrorKind::kLength: return "length error";
    case ErrorKind::kSize: return "size error";
    case ErrorKind::kParameter: return "parameter error";
    case ErrorKind::kNumeric: return "numeric error";
    case ErrorKind::kShape: return "shape error";
    case ErrorKind::kState: return "state error";
    case ErrorKind::kIo: return "I/O error";
    case ErrorKind::kInput: return "input error";
    case ErrorKind::kUndefinedMetric: return "undefined metric";
  }
  return "error";
}

/// Every failure raised by the library carries a kind so callers (and the
/// CLI exit path) can tell contract violations apart without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const char* what) {
  if (!cond) [[unlikely]] fail(kind, what);
}

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) [[unlikely]] fail(kind, what);
}

}  // namespace akvq
