#include "protodet/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace protodet {

namespace {

double eval_scalar(const ScalarFn& fn, const std::vector<Tensor>& inputs) {
  return fn(inputs).item();
}

}  // namespace

std::vector<Tensor> analytic_gradients(const ScalarFn& fn, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Tensor> watched;
  watched.reserve(inputs.size());
  for (const auto& t : inputs) watched.push_back(tape.watch(t));
  Tensor loss = fn(watched);
  Gradients grads = backward(loss);
  std::vector<Tensor> out;
  out.reserve(watched.size());
  for (const auto& w : watched) out.push_back(grads.of(w));
  return out;
}

GradCheckReport compare_gradients(const ScalarFn& fn, const std::vector<Tensor>& inputs,
                                  const std::vector<Tensor>& analytic, double eps, double tol) {
  if (!(eps > 0.0)) throw ParameterError("finite_diff_check: eps must be positive");
  if (analytic.size() != inputs.size()) {
    throw ContractError("one analytic gradient per input required");
  }
  const double f0 = eval_scalar(fn, inputs);
  const double f1 = eval_scalar(fn, inputs);
  if (f0 != f1) throw DeterminismError("function under check is not deterministic");

  GradCheckReport report;
  report.tolerance = tol;
  std::vector<Tensor> probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    if (analytic[k].shape() != inputs[k].shape()) {
      throw DimensionError("analytic gradient shape differs from input");
    }
    double worst = 0.0;
    std::vector<double> base = inputs[k].to_vector();
    for (std::size_t i = 0; i < base.size(); ++i) {
      std::vector<double> v = base;
      v[i] = base[i] + eps;
      probe[k] = Tensor(inputs[k].shape(), v);
      const double fp = eval_scalar(fn, probe);
      v[i] = base[i] - eps;
      probe[k] = Tensor(inputs[k].shape(), v);
      const double fm = eval_scalar(fn, probe);
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
    probe[k] = inputs[k];
    report.max_rel_error.push_back(worst);
    report.worst = std::max(report.worst, worst);
  }
  report.pass = report.worst <= tol;
  return report;
}

GradCheckReport finite_diff_check(const ScalarFn& fn, const std::vector<Tensor>& inputs,
                                  double eps, double tol) {
  std::vector<Tensor> plain;
  plain.reserve(inputs.size());
  for (const auto& t : inputs) plain.push_back(t.detached());
  return compare_gradients(fn, plain, analytic_gradients(fn, plain), eps, tol);
}

}  // namespace protodet
