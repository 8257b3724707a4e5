#include "lotattn/error.hpp"

namespace lotattn {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidInput: return "invalid input";
    case ErrorKind::kShapeMismatch: return "shape mismatch";
    case ErrorKind::kUnsupportedSize: return "unsupported size";
    case ErrorKind::kInsufficientPoints: return "insufficient points";
    case ErrorKind::kDivergence: return "divergence";
    case ErrorKind::kCorruptCheckpoint: return "corrupt checkpoint";
    case ErrorKind::kVersionMismatch: return "version mismatch";
    case ErrorKind::kConfigMismatch: return "config mismatch";
  }
  return "unknown";
}

Error::Error(ErrorKind kind, const std::string& what)
    : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

}  // namespace lotattn
