#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace lotattn {

struct VerifyCheck {
  std::string suite;
  std::string name;
  bool passed = false;
  std::string detail;
};

struct VerifyReport {
  std::vector<VerifyCheck> checks;

  bool passed() const;
  std::string format() const;  // one "PASS|FAIL suite/name detail" line per check
};

inline constexpr const char* kVerifySuites[] = {"ds", "rank", "grad", "ot", "cluster"};

/// Runs the named suite, or every suite for "all". Unknown names throw.
VerifyReport verify(std::string_view suite);

}  // namespace lotattn
