#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "famseg/tensor.hpp"

namespace famseg {

struct GradcheckOptions {
  double h = 1e-4;
  double tol = 1e-4;
  /// Denominator floor of the relative error |a - n| / max(|a|, |n|, floor).
  double floor = 1e-3;
  /// Elements probed per tensor; 0 probes every element.
  std::size_t max_per_tensor = 0;
  std::uint64_t seed = 7;
};

struct GradcheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
  std::string worst;  // "<tensor>[<flat index>]"
  bool passed = true;
};

/// Compares the tape gradient of a scalar loss against central differences
/// for the selected elements of every tensor in `inputs`.
GradcheckReport gradcheck(const std::function<Tensor()>& loss_fn, const std::vector<Tensor>& inputs,
                          const std::vector<std::string>& names, const GradcheckOptions& opt = {});

/// Single-input convenience for non-scalar functions: the output is reduced
/// with a fixed pseudo-random projection so the whole Jacobian is exercised.
GradcheckReport gradcheck(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                          const GradcheckOptions& opt = {});

}  // namespace famseg
