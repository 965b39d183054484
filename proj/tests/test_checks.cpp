#include <doctest.h>

#include <set>

#include "ppg/errors.hpp"
#include "ppg/module_checks.hpp"

using namespace ppg;

TEST_SUITE_BEGIN("checks");

TEST_CASE("every module passes its finite-difference checks") {
  for (const std::string& module : checkable_modules()) {
    CAPTURE(module);
    const auto checks = run_module_checks(module);
    CHECK_FALSE(checks.empty());
    std::set<std::string> names;
    for (const auto& c : checks) {
      CAPTURE(c.name);
      CHECK(c.module == module);
      CHECK(names.insert(c.name).second);
      CHECK(c.report.passed());
      CHECK(c.report.max_rel_error() <= 1e-4);
    }
  }
}

TEST_CASE("the corrupted fixture is caught") {
  const auto checks = run_module_checks(kCorruptedFixture);
  REQUIRE(checks.size() == 1);
  CHECK_FALSE(checks[0].report.passed());
  CHECK(checks[0].report.max_rel_error() > 0.1);
}

TEST_CASE("unknown modules are usage errors") {
  CHECK_THROWS_AS(run_module_checks("warp-drive"), UsageError);
  CHECK(checkable_modules().size() == 6);
}

TEST_SUITE_END();
