#include "dcp/tensor.hpp"

#include <sstream>

#include "dcp/errors.hpp"
#include "op_support.hpp"

namespace dcp {

namespace {
thread_local bool t_grad_enabled = true;
}

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (numel_of(shape) != data.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
  node_ = std::make_shared<detail::Node>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = numel_of(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

detail::Node& Tensor::node() const {
  if (!node_) throw std::logic_error("use of an undefined tensor");
  return *node_;
}

Tensor Tensor::from_node(std::shared_ptr<detail::Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

const Shape& Tensor::shape() const { return node().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return node().data.size(); }

std::span<const double> Tensor::data() const { return node().data; }

std::span<double> Tensor::mutable_data() {
  if (!node().is_leaf) throw TapeError("only leaf tensors may be mutated in place");
  return node().data;
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return node().data[0];
}

bool Tensor::requires_grad() const { return node().requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  if (!node().is_leaf) throw TapeError("requires_grad can only be set on leaves");
  node().requires_grad = flag;
}

bool Tensor::is_leaf() const { return node().is_leaf; }

bool Tensor::has_grad() const { return !node().grad.empty(); }

std::span<const double> Tensor::grad() const { return node().grad; }

std::span<double> Tensor::mutable_grad() {
  auto& n = node();
  if (n.grad.empty()) n.grad.assign(n.data.size(), 0.0);
  return n.grad;
}

void Tensor::zero_grad() {
  auto& g = node().grad;
  std::fill(g.begin(), g.end(), 0.0);
}

Tensor Tensor::clone(bool requires_grad) const { return Tensor(shape(), node().data, requires_grad); }

Tape& Tape::current() {
  thread_local Tape tape;
  return tape;
}

void Tape::record(const std::shared_ptr<detail::Node>& node) {
  node->epoch = epoch_;
  nodes_.push_back(node);
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined()) throw TapeError("backward on an undefined tensor");
  if (loss.numel() != 1) throw TapeError("backward requires a scalar loss, got " + shape_str(loss.shape()));
  auto& root = loss.node();
  if (!root.requires_grad) return;  // constant: nothing depends on a leaf
  if (root.is_leaf) {
    root.grad_buffer()[0] += 1.0;
    return;
  }
  if (root.epoch != epoch_ || !root.backward) {
    throw TapeError("backward on a consumed tape (epoch " + std::to_string(root.epoch) + ", current " +
                    std::to_string(epoch_) + ")");
  }
  root.grad_buffer()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    auto& n = **it;
    if (n.grad.empty() || !n.backward) continue;
    n.backward(n);
  }
  clear();
}

void Tape::clear() {
  for (auto& n : nodes_) {
    n->backward = nullptr;
    n->inputs.clear();
  }
  nodes_.clear();
  ++epoch_;
}

void backward(const Tensor& loss) { Tape::current().backward(loss); }

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

namespace detail {

namespace {
template <typename Range>
Tensor make_result_impl(Shape shape, std::vector<double> data, const Range& inputs,
                        std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool needs = false;
  if (t_grad_enabled) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->is_leaf = false;
    for (const auto& in : inputs) node->inputs.push_back(in.node_ptr());
    node->backward = std::move(backward);
    Tape::current().record(node);
  }
  return Tensor::from_node(std::move(node));
}
}  // namespace

Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<Tensor> inputs,
                   std::function<void(Node&)> backward) {
  return make_result_impl(std::move(shape), std::move(data), inputs, std::move(backward));
}

Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                   std::function<void(Node&)> backward) {
  return make_result_impl(std::move(shape), std::move(data), inputs, std::move(backward));
}

}  // namespace detail

Tensor custom_op(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs, VjpFn vjp) {
  if (numel_of(shape) != data.size()) throw DimensionError("custom_op: shape/data mismatch");
  return detail::make_result(std::move(shape), std::move(data), inputs, [vjp = std::move(vjp)](detail::Node& self) {
    auto grads = vjp(self.grad);
    for (std::size_t i = 0; i < self.inputs.size() && i < grads.size(); ++i) {
      auto& in = *self.inputs[i];
      if (grads[i].empty()) continue;
      double* g = in.grad_buffer();
      if (!g) continue;
      if (grads[i].size() != in.data.size()) throw DimensionError("custom_op: gradient size mismatch");
      for (std::size_t k = 0; k < grads[i].size(); ++k) g[k] += grads[i][k];
    }
  });
}

}  // namespace dcp
