#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dcp {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// One value in the differentiation graph. Non-leaf nodes carry the closure
// that propagates their gradient into `inputs`.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool is_leaf = true;
  std::uint64_t epoch = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  // Gradient buffer of this node, allocated on demand; null when the node
  // does not take gradients.
  double* grad_buffer() {
    if (!requires_grad) return nullptr;
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad.data();
  }
};

}  // namespace detail

/// Dense row-major tensor of 64-bit floats. Copies share the underlying
/// value, the way a handle does; use clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Writable storage; only leaves may be mutated in place.
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t flat) const { return data()[flat]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;

  bool has_grad() const;
  /// Accumulated gradient. Empty span when nothing has been accumulated.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// Independent leaf with the same values and no gradient history.
  Tensor clone(bool requires_grad = false) const;
  Tensor detach() const { return clone(false); }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  detail::Node& node() const;
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }
  static Tensor from_node(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Thread-local record of differentiable operations in creation order.
/// A backward pass walks it in reverse and then consumes it.
class Tape {
 public:
  static Tape& current();

  std::uint64_t epoch() const { return epoch_; }
  std::size_t size() const { return nodes_.size(); }

  void record(const std::shared_ptr<detail::Node>& node);
  void backward(const Tensor& loss);
  /// Drops the recorded graph without propagating; starts a new epoch.
  void clear();

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
  std::uint64_t epoch_ = 1;
};

void backward(const Tensor& loss);

bool grad_enabled();

/// Disables tape recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Vector-Jacobian product for user-defined ops: receives the upstream
/// gradient and returns one gradient buffer per input (empty = none).
using VjpFn = std::function<std::vector<std::vector<double>>(std::span<const double>)>;

Tensor custom_op(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                 VjpFn vjp);

}  // namespace dcp
