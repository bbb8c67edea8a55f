#pragma once

#include <functional>
#include <vector>

#include "protodet/tensor.hpp"

namespace protodet {

struct GradCheckReport {
  std::vector<double> max_rel_error;  // one entry per checked input
  double worst = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

// Scalar-valued function of several tensors. Must be deterministic; any
// dropout inside it has to run in eval mode.
using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Compares analytic gradients of `fn` against central differences
/// (f(x+eps) - f(x-eps)) / (2 eps) coordinate by coordinate. Relative error
/// uses the denominator max(|analytic|, |numeric|, 1e-8).
/// Throws DeterminismError when two plain forward passes disagree.
GradCheckReport finite_diff_check(const ScalarFn& fn, const std::vector<Tensor>& inputs,
                                  double eps = 1e-5, double tol = 1e-4);

/// Same comparison with caller-supplied analytic gradients (one per input).
GradCheckReport compare_gradients(const ScalarFn& fn, const std::vector<Tensor>& inputs,
                                  const std::vector<Tensor>& analytic, double eps, double tol);

/// Analytic gradients of `fn` at `inputs` via a fresh tape.
std::vector<Tensor> analytic_gradients(const ScalarFn& fn, const std::vector<Tensor>& inputs);

}  // namespace protodet
