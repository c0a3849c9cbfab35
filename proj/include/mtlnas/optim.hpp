#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mtlnas/tensor.hpp"

namespace mtlnas {

struct SgdOptions {
  double momentum = 0.9;
  double weight_decay = 0.00025;
};

/// SGD with heavy-ball momentum and L2 decay folded into the gradient:
/// v <- momentum * v + (grad + wd * param); param <- param - lr * v.
class Sgd {
 public:
  explicit Sgd(SgdOptions options = {}) : options_(options) {}

  void step(std::span<Tensor* const> params, std::span<const Tensor> grads, double lr);

  const SgdOptions& options() const { return options_; }
  std::vector<Tensor>& velocity() { return velocity_; }
  const std::vector<Tensor>& velocity() const { return velocity_; }

 private:
  SgdOptions options_;
  std::vector<Tensor> velocity_;
};

struct AdamOptions {
  double lr = 0.003;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.001;
};

/// Bias-corrected Adam, with weight decay added to the gradient (classic L2 form).
class Adam {
 public:
  explicit Adam(AdamOptions options = {}) : options_(options) {}

  void step(std::span<Tensor* const> params, std::span<const Tensor> grads);

  const AdamOptions& options() const { return options_; }
  std::uint64_t steps() const { return steps_; }
  std::vector<Tensor>& first_moment() { return m_; }
  std::vector<Tensor>& second_moment() { return v_; }
  const std::vector<Tensor>& first_moment() const { return m_; }
  const std::vector<Tensor>& second_moment() const { return v_; }
  void restore(std::uint64_t steps, std::vector<Tensor> m, std::vector<Tensor> v);

 private:
  AdamOptions options_;
  std::uint64_t steps_ = 0;
  std::vector<Tensor> m_, v_;
};

/// base * (1 - step/total)^power
double poly_lr(double base, std::uint64_t step, std::uint64_t total, double power = 0.9);

}  // namespace mtlnas
