#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace tsnet {

using Shape = std::vector<std::size_t>;
using Vector = Eigen::VectorXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  Vector value;
  Vector grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Propagates this->grad into the parents' grad buffers.
  std::function<void(const Node&)> backward;

  bool is_leaf() const { return !backward; }
  void accumulate(const Eigen::Ref<const Vector>& g);
};

}  // namespace detail

/// Dense row-major n-d array of doubles that records the operations applied
/// to it for reverse-mode differentiation.
///
/// A Tensor is a shared handle: copies alias the same storage and graph
/// node. Image tensors use the N x C x H x W layout.
///
/// Gradients accumulate. Calling backward() twice without zero_grad() adds
/// the second gradient onto the first for every leaf.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, Vector values, bool requires_grad = false);
  Tensor(Shape shape, std::initializer_list<double> values, bool requires_grad = false);

  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;

  Vector& values();
  const Vector& values() const;
  double* data() { return values().data(); }
  const double* data() const { return values().data(); }
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool on);

  /// Gradient buffer; zero-filled if backward has not reached this tensor.
  const Vector& grad() const;
  bool has_grad() const;
  void zero_grad();

  /// Reverse-mode sweep from this scalar. Fills grad() on every ancestor
  /// that requires a gradient.
  void backward() const;

  /// Copy of the values with no graph history.
  Tensor detach() const;

  /// Result of an operation. `backward` may be empty when no parent needs a
  /// gradient; parents are then not retained.
  static Tensor from_op(Shape shape, Vector values, std::vector<Tensor> parents,
                        std::function<void(const detail::Node&)> backward);

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  detail::Node& checked() const;

  std::shared_ptr<detail::Node> node_;
};

// ---------------------------------------------------------------------------
// Differentiable operations.

/// 2-D cross-correlation. input N x Cin x H x W, weight Cout x Cin x kh x kw,
/// bias Cout. Output N x Cout x H' x W' with H' = (H + 2p - kh) / stride + 1.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t padding);

/// max(x, 0); the subgradient at 0 is 0.
Tensor relu(const Tensor& x);

/// Mean over H x W of each channel: N x C x H x W -> N x C.
Tensor global_avg_pool(const Tensor& x);

/// x W^T + b with x N x Din, W Dout x Din, b Dout.
Tensor dense(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor elementwise_mul(const Tensor& a, const Tensor& b);

/// Inverted dropout. Identity (same handle) when !training or p == 0.
Tensor dropout(const Tensor& x, double p, bool training, std::uint64_t seed);

/// Mean of squared differences, returned as a scalar.
Tensor mse(const Tensor& pred, const Tensor& target);

Tensor sum(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double alpha);

/// Column j of an N x D tensor, as a length-N tensor.
Tensor select_column(const Tensor& x, std::size_t column);

// ---------------------------------------------------------------------------
// Verification and optimization.

/// Max over coordinates of |analytic - numeric| / max(1e-12, |analytic| + |numeric|),
/// where numeric is the central difference (f(t + eps e_i) - f(t - eps e_i)) / 2 eps.
/// `f` must rebuild its graph from `theta` on every call. theta's gradient is
/// reset before and after the check and its values are restored.
double grad_check(const std::function<Tensor()>& f, Tensor theta, double eps);

struct AdamState {
  Vector m;
  Vector v;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// One bias-corrected Adam update of theta in place. Zero-initialises the
/// moment buffers on first use.
void adam_step(Tensor& theta, const Vector& grad, AdamState& state, double lr);

/// Adam over a fixed list of parameters. Parameters that do not require a
/// gradient are skipped and keep their state untouched.
class Adam {
 public:
  Adam(std::vector<Tensor> params, double lr);

  void step();
  void zero_grad();

  double learning_rate() const { return lr_; }
  const std::vector<AdamState>& states() const { return states_; }
  std::vector<AdamState>& states() { return states_; }

 private:
  std::vector<Tensor> params_;
  std::vector<AdamState> states_;
  double lr_;
};

}  // namespace tsnet
