#include "mtlnas/optim.hpp"

#include <cmath>
#include <string>

namespace mtlnas {
namespace {

void check_pairs(const char* who, std::span<Tensor* const> params, std::span<const Tensor> grads,
                 const std::vector<Tensor>& state) {
  if (params.size() != grads.size()) {
    throw ShapeError(std::string(who) + ": " + std::to_string(params.size()) + " params but " +
                     std::to_string(grads.size()) + " grads");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i].shape()) {
      throw ShapeError(std::string(who) + ": param " + std::to_string(i) + " is " + to_string(params[i]->shape()) +
                       " but grad is " + to_string(grads[i].shape()));
    }
    if (i < state.size() && state[i].shape() != params[i]->shape()) {
      throw ShapeError(std::string(who) + ": optimizer state " + std::to_string(i) + " is " +
                       to_string(state[i].shape()) + " but param is " + to_string(params[i]->shape()));
    }
  }
}

void ensure_state(std::vector<Tensor>& state, std::span<Tensor* const> params) {
  if (!state.empty()) {
    if (state.size() != params.size()) throw ShapeError("optimizer: parameter count changed between steps");
    return;
  }
  for (Tensor* p : params) state.emplace_back(p->shape(), 0.0);
}

}  // namespace

void Sgd::step(std::span<Tensor* const> params, std::span<const Tensor> grads, double lr) {
  check_pairs("sgd_step", params, grads, velocity_);
  ensure_state(velocity_, params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    Tensor& v = velocity_[i];
    const Tensor& g = grads[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      v[k] = options_.momentum * v[k] + (g[k] + options_.weight_decay * p[k]);
      p[k] -= lr * v[k];
    }
  }
}

void Adam::step(std::span<Tensor* const> params, std::span<const Tensor> grads) {
  check_pairs("adam_step", params, grads, m_);
  ensure_state(m_, params);
  ensure_state(v_, params);
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double c1 = 1.0 - std::pow(options_.beta1, t);
  const double c2 = 1.0 - std::pow(options_.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double g = grads[i][k] + options_.weight_decay * p[k];
      m_[i][k] = options_.beta1 * m_[i][k] + (1.0 - options_.beta1) * g;
      v_[i][k] = options_.beta2 * v_[i][k] + (1.0 - options_.beta2) * g * g;
      const double mhat = m_[i][k] / c1;
      const double vhat = v_[i][k] / c2;
      p[k] -= options_.lr * mhat / (std::sqrt(vhat) + options_.eps);
    }
  }
}

void Adam::restore(std::uint64_t steps, std::vector<Tensor> m, std::vector<Tensor> v) {
  if (m.size() != v.size()) throw ShapeError("adam: moment buffers differ in count");
  steps_ = steps;
  m_ = std::move(m);
  v_ = std::move(v);
}

double poly_lr(double base, std::uint64_t step, std::uint64_t total, double power) {
  if (total == 0) return base;
  if (step >= total) return 0.0;
  return base * std::pow(1.0 - static_cast<double>(step) / static_cast<double>(total), power);
}

}  // namespace mtlnas
