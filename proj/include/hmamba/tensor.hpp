#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace hmamba {

// Thrown on shape/axis violations (distinct from numeric failures so callers
// can map them to different exit codes).
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class Tensor;

// One recorded primitive application. `parents` hold handles to the inputs,
// `backward` scatters the output gradient into them.
struct Node {
  std::vector<Tensor> parents;
  std::function<void(Tensor&)> backward;
};

struct TensorImpl {
  std::vector<int> shape;
  std::vector<double> values;
  std::vector<double> grad;  // defined iff grad_defined
  bool grad_defined = false;
  bool requires_grad = false;
  std::shared_ptr<Node> node;  // null for leaves
};

// Dense row-major tensor of doubles participating in reverse-mode
// differentiation. Copies share storage; the class is a cheap handle.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
  static Tensor from_values(std::vector<int> shape, std::vector<double> values,
                            bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const { return impl_->shape; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int i) const { return impl_->shape.at(static_cast<std::size_t>(i)); }
  std::size_t numel() const { return impl_->values.size(); }

  std::vector<double>& values() { return impl_->values; }
  const std::vector<double>& values() const { return impl_->values; }
  double item() const;            // requires numel() == 1
  double at(int i) const;         // 1-D access
  double at(int i, int j) const;  // 2-D access
  double& at_mut(int i, int j);

  bool requires_grad() const { return impl_->requires_grad; }
  bool grad_defined() const { return impl_ && impl_->grad_defined; }
  std::vector<double>& grad();  // throws if no backward pass populated it
  const std::vector<double>& grad() const;

  // Drops the gradient; required between backward passes.
  void clear_grad();

  // Reverse-mode pass from a scalar root. Rejects a repeated pass while any
  // reachable grad is still populated (no silent accumulation).
  void backward() const;

  std::shared_ptr<Node>& node() { return impl_->node; }
  const std::shared_ptr<Node>& node() const { return impl_->node; }

  // Identity of the underlying storage; graph key.
  const void* id() const { return impl_.get(); }

  void ensure_grad_buffer();  // zero-filled, marks grad defined

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Topological linearization of the graph below a root: every node's parents
// precede it, and backward() walks it exactly once in reverse.
class Tape {
 public:
  static Tape build(const Tensor& root);
  const std::vector<Tensor>& order() const { return order_; }

 private:
  std::vector<Tensor> order_;
};

std::size_t shape_numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

}  // namespace hmamba
