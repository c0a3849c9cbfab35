#include "mtlnas/tape.hpp"

#include <algorithm>

namespace mtlnas {

const Tensor& Var::value() const { return tape->value(id); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                   [this](std::size_t in) { return nodes_.at(in).requires_grad; });
  if (node.requires_grad) node.backward = std::move(backward);
  node.inputs = std::move(inputs);
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

const Tensor& Tape::grad(std::size_t id) { return grad_accumulator(id); }

Tensor& Tape::grad_accumulator(std::size_t id) {
  Node& node = nodes_.at(id);
  if (!node.has_grad) {
    node.grad = Tensor(node.value.shape(), 0.0);
    node.has_grad = true;
  }
  return node.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw Error("backward: loss is not recorded on this tape");
  if (consumed_) throw Error("backward: tape already differentiated");
  if (loss.id >= nodes_.size()) throw Error("backward: loss id out of range");
  if (nodes_[loss.id].value.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + to_string(nodes_[loss.id].value.shape()));
  }
  consumed_ = true;
  grad_accumulator(loss.id)[0] = 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.has_grad || !node.requires_grad || !node.backward) continue;
    node.backward(*this, i);
  }
}

}  // namespace mtlnas
