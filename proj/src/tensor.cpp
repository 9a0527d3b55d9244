#include "tsnet/tensor.hpp"

#include <sstream>
#include <unordered_set>

#include "tsnet/error.hpp"

namespace tsnet {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace detail {

void Node::accumulate(const Eigen::Ref<const Vector>& g) {
  if (!requires_grad) return;
  if (grad.size() != value.size()) grad = Vector::Zero(value.size());
  grad += g;
}

}  // namespace detail

namespace {

void check_shape(const Shape& shape) {
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
  }
}

}  // namespace

Tensor::Tensor(Shape shape, bool requires_grad) {
  check_shape(shape);
  node_ = std::make_shared<detail::Node>();
  node_->value = Vector::Zero(static_cast<Eigen::Index>(numel(shape)));
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, Vector values, bool requires_grad) {
  check_shape(shape);
  if (static_cast<std::size_t>(values.size()) != numel(shape)) {
    throw ShapeError("tensor of shape " + to_string(shape) + " needs " +
                     std::to_string(numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  node_ = std::make_shared<detail::Node>();
  node_->value = std::move(values);
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::initializer_list<double> values, bool requires_grad)
    : Tensor(std::move(shape),
             Eigen::Map<const Vector>(values.begin(), static_cast<Eigen::Index>(values.size())),
             requires_grad) {}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{1}, {value}, requires_grad);
}

detail::Node& Tensor::checked() const {
  if (!node_) throw UsageError("use of an undefined tensor");
  return *node_;
}

const Shape& Tensor::shape() const { return checked().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(s));
  }
  return s[axis];
}

std::size_t Tensor::size() const { return static_cast<std::size_t>(checked().value.size()); }

Vector& Tensor::values() { return checked().value; }
const Vector& Tensor::values() const { return checked().value; }

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on non-scalar tensor " + to_string(shape()));
  return values()[0];
}

bool Tensor::requires_grad() const { return checked().requires_grad; }

void Tensor::set_requires_grad(bool on) {
  detail::Node& n = checked();
  if (!n.is_leaf()) throw UsageError("requires_grad can only be changed on leaf tensors");
  n.requires_grad = on;
}

const Vector& Tensor::grad() const {
  detail::Node& n = checked();
  if (n.grad.size() != n.value.size()) n.grad = Vector::Zero(n.value.size());
  return n.grad;
}

bool Tensor::has_grad() const { return checked().grad.size() == checked().value.size(); }

void Tensor::zero_grad() {
  detail::Node& n = checked();
  if (n.grad.size() == n.value.size()) n.grad.setZero();
}

Tensor Tensor::detach() const { return Tensor(shape(), values(), false); }

Tensor Tensor::from_op(Shape shape, Vector values, std::vector<Tensor> parents,
                       std::function<void(const detail::Node&)> backward) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  bool needs = false;
  for (const Tensor& p : parents) needs = needs || p.requires_grad();
  if (needs && backward) {
    node->requires_grad = true;
    node->backward = std::move(backward);
    node->parents.reserve(parents.size());
    for (Tensor& p : parents) node->parents.push_back(p.node_);
  }
  return Tensor(std::move(node));
}

void Tensor::backward() const {
  detail::Node& root = checked();
  if (root.value.size() != 1) {
    throw ShapeError("backward() requires a scalar root, got " + to_string(root.shape));
  }
  if (!root.requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<detail::Node*> order;
  std::unordered_set<const detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(&root, 0);
  seen.insert(&root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior buffers are scratch for this sweep; leaves accumulate.
  for (detail::Node* n : order) {
    if (!n->is_leaf()) n->grad = Vector::Zero(n->value.size());
  }
  if (root.is_leaf()) {
    root.accumulate(Vector::Ones(1));
    return;
  }
  root.grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (!(*it)->is_leaf()) (*it)->backward(**it);
  }
  for (detail::Node* n : order) {
    if (!n->is_leaf()) n->grad.resize(0);
  }
}

}  // namespace tsnet
