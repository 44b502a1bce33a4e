// Copyright (C) 2026 The tokensel authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tokensel/errors.hpp"

namespace tokensel {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

class Tape;

// Dense row-major tensor of 64-bit floats. A tensor is a cheap handle: the
// value buffer is shared, and an optional (tape, node) binding identifies the
// node that produced it on the active tape. Tensors without a binding are
// plain values and never receive gradients.
class Tensor {
 public:
  Tensor() : shape_{}, values_(std::make_shared<std::vector<double>>()) {}

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        values_(std::make_shared<std::vector<double>>(shape_size(shape_), 0.0)) {}

  Tensor(Shape shape, std::vector<double> values)
      : shape_(std::move(shape)),
        values_(std::make_shared<std::vector<double>>(std::move(values))) {
    if (values_->size() != shape_size(shape_)) {
      throw DimensionError("tensor data size " + std::to_string(values_->size()) +
                           " does not match shape " + shape_to_string(shape_));
    }
  }

  static Tensor scalar(double value) { return Tensor({1}, {value}); }
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double value) {
    Tensor t(std::move(shape));
    for (double& x : *t.values_) x = value;
    return t;
  }
  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }

  const Shape& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return values_->size(); }
  bool empty() const { return values_->empty(); }

  double* data() { return values_->data(); }
  const double* data() const { return values_->data(); }
  std::vector<double>& values() { return *values_; }
  const std::vector<double>& values() const { return *values_; }

  double item() const {
    if (size() != 1) {
      throw DimensionError("item() requires a single-element tensor, got shape " +
                           shape_to_string(shape_));
    }
    return (*values_)[0];
  }

  // True when the tensor is bound to an active tape and will take part in
  // backward passes.
  bool requires_grad() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int node() const { return node_; }

  // Same value buffer, no tape binding.
  Tensor detached() const {
    Tensor t;
    t.shape_ = shape_;
    t.values_ = values_;
    return t;
  }

  // Deep copy of the values, no tape binding.
  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.values_ = std::make_shared<std::vector<double>>(*values_);
    return t;
  }

 private:
  friend class Tape;

  Shape shape_;
  std::shared_ptr<std::vector<double>> values_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

// Recording of one differentiable computation: an ordered list of nodes in
// topological order (inputs always precede consumers). backward() walks the
// list once in reverse, accumulating gradients; node backward rules are
// closures that own whatever forward values they need.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const std::vector<double>& upstream)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers a value as a leaf of this tape and returns the bound handle.
  Tensor watch(const Tensor& t) {
    if (t.tape_ != nullptr) {
      throw InputError("tensor already participates in an active tape");
    }
    Tensor bound = t.detached();
    bound.tape_ = this;
    bound.node_ = record("leaf", bound.shape_, {}, nullptr);
    return bound;
  }

  int record(std::string_view op, const Shape& shape, std::vector<int> inputs,
             BackwardFn backward) {
    Node node;
    node.op = std::string(op);
    node.shape = shape;
    node.inputs = std::move(inputs);
    node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return static_cast<int>(nodes_.size()) - 1;
  }

  // Binds an already-computed output tensor to a freshly recorded node.
  Tensor bind(Tensor value, std::string_view op, std::vector<int> inputs,
              BackwardFn backward) {
    value.tape_ = this;
    value.node_ = record(op, value.shape_, std::move(inputs), std::move(backward));
    return value;
  }

  std::size_t node_count() const { return nodes_.size(); }
  const std::string& op_name(int node) const {
    return nodes_.at(static_cast<std::size_t>(node)).op;
  }

  // Reverse sweep from a scalar root. Each node is visited exactly once;
  // gradient contributions accumulate (a tensor used twice receives the sum).
  void backward(const Tensor& root) {
    if (root.tape_ != this) {
      throw InputError("backward root does not belong to this tape");
    }
    if (root.size() != 1) {
      throw DimensionError("backward root must be scalar, got shape " +
                           shape_to_string(root.shape_));
    }
    if (ran_backward_) {
      throw InputError("tape supports a single backward pass");
    }
    ran_backward_ = true;
    nodes_[static_cast<std::size_t>(root.node_)].grad.assign(1, 1.0);
    for (int i = root.node_; i >= 0; --i) {
      Node& node = nodes_[static_cast<std::size_t>(i)];
      if (node.grad.empty() || !node.backward) continue;
      node.backward(*this, node.grad);
    }
  }

  void accumulate(int node, const double* grad, std::size_t n) {
    Node& target = nodes_.at(static_cast<std::size_t>(node));
    if (target.grad.empty()) target.grad.assign(shape_size(target.shape), 0.0);
    if (target.grad.size() != n) {
      throw DimensionError("gradient size mismatch for node " + target.op);
    }
    for (std::size_t i = 0; i < n; ++i) target.grad[i] += grad[i];
  }

  void accumulate(int node, const std::vector<double>& grad) {
    accumulate(node, grad.data(), grad.size());
  }

  bool has_grad(const Tensor& t) const {
    return t.tape_ == this && t.node_ >= 0 &&
           !nodes_[static_cast<std::size_t>(t.node_)].grad.empty();
  }

  // Gradient of the last backward() root with respect to `t`; zeros when the
  // tensor did not influence the root.
  Tensor grad(const Tensor& t) const {
    if (t.tape_ != this) {
      throw InputError("tensor does not belong to this tape");
    }
    const Node& node = nodes_.at(static_cast<std::size_t>(t.node_));
    if (node.grad.empty()) return Tensor::zeros(t.shape_);
    return Tensor(t.shape_, node.grad);
  }

 private:
  struct Node {
    std::string op;
    Shape shape;
    std::vector<int> inputs;
    std::vector<double> grad;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  bool ran_backward_ = false;
};

// --- custom operators -------------------------------------------------------
//
// Registration point for operators whose backward rule is a closed form
// rather than a trace of their forward computation. The forward callback runs
// on detached values only, so nothing it does internally can leave nodes on
// the tape; exactly one node is recorded per call.

struct CustomOpResult {
  Tensor output;
  std::vector<Tensor> saved;
};

struct CustomOp {
  std::string name;
  // inputs are detached value tensors.
  std::function<CustomOpResult(const std::vector<Tensor>&)> forward;
  // (saved forward values, upstream gradient) -> one gradient per input;
  // an empty tensor marks an input that takes no gradient.
  std::function<std::vector<Tensor>(const std::vector<Tensor>&, const Tensor&)>
      backward;
};

namespace detail {
inline std::vector<CustomOp>& custom_op_registry() {
  static std::vector<CustomOp> registry;
  return registry;
}
}  // namespace detail

inline int register_custom_op(CustomOp op) {
  auto& registry = detail::custom_op_registry();
  registry.push_back(std::move(op));
  return static_cast<int>(registry.size()) - 1;
}

inline const CustomOp& custom_op(int id) {
  return detail::custom_op_registry().at(static_cast<std::size_t>(id));
}

struct AppliedCustomOp {
  Tensor output;
  std::vector<Tensor> saved;  // detached forward values, also kept for backward
};

inline AppliedCustomOp apply_custom_op_with_saved(int id,
                                                  const std::vector<Tensor>& inputs) {
  const CustomOp& op = custom_op(id);

  Tape* tape = nullptr;
  for (const Tensor& input : inputs) {
    if (!input.requires_grad()) continue;
    if (tape != nullptr && tape != input.tape()) {
      throw InputError("custom op inputs live on different tapes");
    }
    tape = input.tape();
  }

  std::vector<Tensor> detached;
  detached.reserve(inputs.size());
  for (const Tensor& input : inputs) detached.push_back(input.detached());

  CustomOpResult result = op.forward(detached);
  auto saved = std::make_shared<std::vector<Tensor>>(std::move(result.saved));
  if (tape == nullptr) return {std::move(result.output), *saved};

  std::vector<int> input_nodes;
  input_nodes.reserve(inputs.size());
  for (const Tensor& input : inputs) {
    input_nodes.push_back(input.requires_grad() ? input.node() : -1);
  }

  Shape upstream_shape = result.output.shape();
  auto backward_rule = op.backward;
  Tensor bound = tape->bind(
      std::move(result.output), op.name, input_nodes,
      [saved, input_nodes, upstream_shape, backward_rule](
          Tape& t, const std::vector<double>& upstream) {
        Tensor g(upstream_shape, upstream);
        std::vector<Tensor> input_grads = backward_rule(*saved, g);
        for (std::size_t i = 0; i < input_nodes.size(); ++i) {
          if (input_nodes[i] < 0) continue;
          if (i >= input_grads.size() || input_grads[i].empty()) continue;
          t.accumulate(input_nodes[i], input_grads[i].values());
        }
      });
  return {std::move(bound), *saved};
}

inline Tensor apply_custom_op(int id, const std::vector<Tensor>& inputs) {
  return apply_custom_op_with_saved(id, inputs).output;
}

}  // namespace tokensel
