#pragma once

#include <string>
#include <vector>

#include "famseg/gradcheck.hpp"

namespace famseg {

struct SuiteResult {
  std::string module;
  GradcheckReport report;
  double seconds = 0.0;
};

/// strip, mamba, fam, hamburger, full
const std::vector<std::string>& gradcheck_modules();

/// Finite-difference check of one module on small random inputs, covering
/// the module input and every parameter. Unknown names raise ConfigError.
SuiteResult run_gradcheck_suite(const std::string& module, const GradcheckOptions& opt = {});

}  // namespace famseg
