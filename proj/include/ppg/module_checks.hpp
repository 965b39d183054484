#pragma once

#include <string>
#include <vector>

#include "ppg/gradcheck.hpp"

// Finite-difference checks of every differentiable module on small random
// configurations, as run by `ppg gradcheck`.
namespace ppg {

struct ModuleCheck {
  std::string module;
  std::string name;
  GradCheckReport report;
};

// tensor-autodiff, nn-blocks, ssm-vim, csm, ccm, sam-stub.
const std::vector<std::string>& checkable_modules();

// Not in checkable_modules(): an op whose backward rule is deliberately wrong.
// Its check must fail, which shows the harness can.
inline constexpr const char* kCorruptedFixture = "corrupted-fixture";

// Throws UsageError for an unknown module name.
std::vector<ModuleCheck> run_module_checks(const std::string& module, const GradCheckOptions& options = {});

}  // namespace ppg
