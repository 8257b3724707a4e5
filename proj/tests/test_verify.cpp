#include "doctest.h"
#include "lotattn/error.hpp"
#include "lotattn/verify.hpp"

using namespace lotattn;

TEST_CASE("verify dispatch") {
  for (const char* suite : kVerifySuites) {
    const VerifyReport rep = verify(suite);
    CHECK_FALSE(rep.checks.empty());
    for (const auto& c : rep.checks) {
      CHECK(c.suite == suite);
      CHECK_MESSAGE(c.passed, c.suite << '/' << c.name << ' ' << c.detail);
    }
  }
  const VerifyReport all = verify("all");
  CHECK(all.passed());
  CHECK(all.format().find("FAIL") == std::string::npos);
  CHECK_THROWS_AS(verify("speed"), Error);
}

TEST_CASE("report formatting") {
  VerifyReport rep;
  rep.checks.push_back({"ds", "a", true, "x = 1"});
  rep.checks.push_back({"ot", "b", false, ""});
  CHECK_FALSE(rep.passed());
  CHECK(rep.format() == "PASS ds/a  x = 1\nFAIL ot/b\n");
}
