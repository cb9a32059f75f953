#include "hmamba/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace hmamba {

std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  Tensor t;
  t.impl_ = std::make_shared<TensorImpl>();
  t.impl_->values.assign(shape_numel(shape), 0.0);
  t.impl_->shape = std::move(shape);
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.impl_->values.begin(), t.impl_->values.end(), value);
  return t;
}

Tensor Tensor::from_values(std::vector<int> shape, std::vector<double> values,
                           bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("from_values: shape " + shape_str(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  Tensor t;
  t.impl_ = std::make_shared<TensorImpl>();
  t.impl_->shape = std::move(shape);
  t.impl_->values = std::move(values);
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_values({1}, {value}, requires_grad);
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not scalar");
  return impl_->values[0];
}

double Tensor::at(int i) const {
  return impl_->values.at(static_cast<std::size_t>(i));
}

double Tensor::at(int i, int j) const {
  if (ndim() != 2) throw ShapeError("at(i,j): tensor " + shape_str(shape()) + " is not 2-D");
  return impl_->values[static_cast<std::size_t>(i) * static_cast<std::size_t>(dim(1)) +
                       static_cast<std::size_t>(j)];
}

double& Tensor::at_mut(int i, int j) {
  if (ndim() != 2) throw ShapeError("at_mut: tensor " + shape_str(shape()) + " is not 2-D");
  return impl_->values[static_cast<std::size_t>(i) * static_cast<std::size_t>(dim(1)) +
                       static_cast<std::size_t>(j)];
}

std::vector<double>& Tensor::grad() {
  if (!impl_->grad_defined) {
    throw std::logic_error("grad(): gradient not defined; run backward() first");
  }
  return impl_->grad;
}

const std::vector<double>& Tensor::grad() const {
  if (!impl_->grad_defined) {
    throw std::logic_error("grad(): gradient not defined; run backward() first");
  }
  return impl_->grad;
}

void Tensor::clear_grad() {
  impl_->grad.clear();
  impl_->grad.shrink_to_fit();
  impl_->grad_defined = false;
}

void Tensor::ensure_grad_buffer() {
  if (!impl_->grad_defined) {
    impl_->grad.assign(impl_->values.size(), 0.0);
    impl_->grad_defined = true;
  }
}

Tape Tape::build(const Tensor& root) {
  Tape tape;
  // Iterative post-order DFS; parents are pushed before the node itself is
  // emitted, giving a topological order over the reachable subgraph.
  std::unordered_set<const void*> visited;
  struct Frame {
    Tensor t;
    std::size_t next_parent = 0;
  };
  std::vector<Frame> stack;
  if (root.requires_grad()) stack.push_back({root, 0});
  visited.insert(root.id());
  while (!stack.empty()) {
    Frame& fr = stack.back();
    const auto& node = fr.t.node();
    std::size_t n_parents = node ? node->parents.size() : 0;
    if (fr.next_parent < n_parents) {
      Tensor parent = node->parents[fr.next_parent++];
      if (parent.requires_grad() && !visited.count(parent.id())) {
        visited.insert(parent.id());
        stack.push_back({parent, 0});
      }
    } else {
      tape.order_.push_back(fr.t);
      stack.pop_back();
    }
  }
  return tape;
}

void Tensor::backward() const {
  if (numel() != 1) {
    throw ShapeError("backward: root must be scalar, got " + shape_str(shape()));
  }
  if (!requires_grad()) {
    throw std::logic_error("backward: root does not require grad");
  }
  Tape tape = Tape::build(*this);
  for (const Tensor& t : tape.order()) {
    if (t.grad_defined()) {
      throw std::logic_error(
          "backward: gradients from a previous pass are still present; "
          "call clear_grad() on the parameters first");
    }
  }
  for (const Tensor& t : tape.order()) {
    const_cast<Tensor&>(t).ensure_grad_buffer();
  }
  impl_->grad[0] = 1.0;
  const auto& order = tape.order();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Tensor t = *it;
    if (t.node() && t.node()->backward) {
      t.node()->backward(t);
    }
  }
}

}  // namespace hmamba
