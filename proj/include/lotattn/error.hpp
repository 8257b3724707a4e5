#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace lotattn {

enum class ErrorKind {
  kInvalidInput,
  kShapeMismatch,
  kUnsupportedSize,
  kInsufficientPoints,
  kDivergence,
  kCorruptCheckpoint,
  kVersionMismatch,
  kConfigMismatch,
};

std::string_view to_string(ErrorKind kind);

// All library failures surface as this exception; `kind()` lets callers and
// tests distinguish the contract violation without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what);

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& what);

inline void require(bool cond, ErrorKind kind, const char* what) {
  if (!cond) fail(kind, what);
}

}  // namespace lotattn
