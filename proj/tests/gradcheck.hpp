#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "mtlnas/tape.hpp"
#include "mtlnas/tensor.hpp"

namespace mtlnas::testing {

using LossBuilder = std::function<Var(Tape&, const std::vector<Var>&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

inline std::vector<Tensor> analytic_grads(const LossBuilder& build, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> leaves;
  for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t, true));
  Var loss = build(tape, leaves);
  tape.backward(loss);
  std::vector<Tensor> grads;
  for (const Var& v : leaves) grads.push_back(tape.grad(v));
  return grads;
}

inline double evaluate(const LossBuilder& build, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> leaves;
  for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t, false));
  return build(tape, leaves).value().item();
}

/// Central differences with step h. Relative error uses max(|a|, |n|, floor)
/// in the denominator so that near-zero gradients are compared absolutely.
inline GradCheckResult grad_check(const LossBuilder& build, std::vector<Tensor> inputs, double h = 1e-6,
                                  double floor = 1e-3) {
  const auto grads = analytic_grads(build, inputs);
  GradCheckResult r;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double saved = inputs[k][i];
      inputs[k][i] = saved + h;
      const double up = evaluate(build, inputs);
      inputs[k][i] = saved - h;
      const double down = evaluate(build, inputs);
      inputs[k][i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = grads[k][i];
      const double abs_err = std::abs(numeric - analytic);
      const double denom = std::max({std::abs(numeric), std::abs(analytic), floor});
      r.max_abs_error = std::max(r.max_abs_error, abs_err);
      r.max_rel_error = std::max(r.max_rel_error, abs_err / denom);
    }
  }
  return r;
}

}  // namespace mtlnas::testing
