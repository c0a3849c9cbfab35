#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "mtlnas/tensor.hpp"

namespace mtlnas {

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Append-only record of a forward computation. Nodes are stored in creation
/// order, which is a topological order, so backward is a single reverse sweep.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Records an op output. The node requires grad iff any input does; the
  /// backward rule is dropped otherwise.
  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  const Tensor& value(Var v) const { return value(v.id); }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  bool requires_grad(Var v) const { return requires_grad(v.id); }

  /// Incoming gradient of node `id`; zeros if nothing flowed into it.
  const Tensor& grad(std::size_t id);
  const Tensor& grad(Var v) { return grad(v.id); }

  /// Mutable gradient accumulator for an input, allocated on first use.
  Tensor& grad_accumulator(std::size_t id);

  /// Populates d(loss)/d(node) for every requires-grad node reachable from
  /// `loss`. A tape can be differentiated once.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

}  // namespace mtlnas
