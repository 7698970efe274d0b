// SPDX-License-Identifier: Apache-2.0
//
// Dense f64 tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap shared handle. Operations in imad::ops build a graph
// whenever grad mode is enabled and at least one input requires a gradient;
// backward() walks that graph once in reverse topological order, accumulates
// gradients into every leaf that requires them and then releases the graph.
//
// All operations work on rank-1 or rank-2 tensors. A rank-1 tensor of extent
// n behaves as a 1 x n row; results are always rank 2 and a scalar is 1 x 1.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace imad {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

/// Thrown when operand shapes do not conform to an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown for misuse of the autodiff graph (non-scalar loss, no graph, ...).
class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Thrown when a forward or backward pass produces NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Tensor;

namespace detail {

struct TensorImpl;

struct Node {
  const char* kind = "";
  std::vector<Tensor> inputs;
  // Receives the finished output (value + gradient) and pushes gradient
  // contributions into the inputs.
  std::function<void(const TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<Node> node;
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor row(std::vector<double> values, bool requires_grad = false);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                       bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t size() const { return impl_->data.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return impl_->data; }
  /// Mutable access to the values. Intended for leaves (parameters); writing
  /// through a tensor that is part of a live graph invalidates the graph.
  std::span<double> mutable_data() { return impl_->data; }
  double at(std::size_t r, std::size_t c) const;
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool flag);
  bool has_grad() const { return !impl_->grad.empty(); }
  /// Gradient buffer; zeros of the right size when nothing has accumulated.
  std::vector<double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();
  bool is_leaf() const { return impl_->node == nullptr; }

  /// Deep copy of the values with no graph attached.
  Tensor detach() const;
  /// Copy that keeps requires_grad but drops any graph.
  Tensor clone() const;

  const detail::TensorImpl* id() const { return impl_.get(); }
  detail::TensorImpl& impl() const { return *impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl)
      : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;

  friend Tensor make_result(const char*, Shape, std::vector<double>,
                            std::vector<Tensor>,
                            std::function<void(const detail::TensorImpl&)>);
};

/// Builds an operation result; records a graph node when grad mode is on and
/// some input requires grad. Used by the op implementations.
Tensor make_result(const char* kind, Shape shape, std::vector<double> data,
                   std::vector<Tensor> inputs,
                   std::function<void(const detail::TensorImpl&)> backward);

/// Adds `g` into the gradient of `t` if it requires one.
void accumulate_grad(const Tensor& t, std::span<const double> g);

/// Runs reverse-mode differentiation from a scalar loss.
void backward(const Tensor& loss);

bool grad_enabled();

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Per-thread floating point operation counter (forward passes only).
namespace flops {
void reset();
std::uint64_t count();
void add(std::uint64_t n);
}  // namespace flops

enum class PadMode { zero, ring };

namespace ops {

Tensor matmul(const Tensor& a, const Tensor& b);
/// Elementwise with broadcasting of `b` over rows (1 x c), columns (r x 1)
/// or both (1 x 1).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, std::size_t begin, std::size_t length);
std::vector<Tensor> split(const Tensor& a, const std::vector<std::size_t>& sizes,
                          int axis);
Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a);
/// out[i] = a[i - offset] for rows; rows shifted in from outside are zero
/// (PadMode::zero) or wrap around (PadMode::ring).
Tensor shift_rows(const Tensor& a, int offset, PadMode mode);

Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softmax(const Tensor& a, int axis);
/// Row-wise normalisation with per-column gain and bias (both 1 x c).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);
Tensor embedding_lookup(const Tensor& table, const std::vector<std::size_t>& ids);

/// axis 0 reduces rows (-> 1 x c), axis 1 reduces columns (-> r x 1),
/// axis -1 reduces everything (-> 1 x 1).
Tensor sum(const Tensor& a, int axis = -1);
Tensor mean(const Tensor& a, int axis = -1);

/// Cosine of the two flattened tensors; 0 when either has zero norm.
Tensor cosine_similarity(const Tensor& a, const Tensor& b);
/// Mean over rows of -log softmax(logits)[row, target[row]].
Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& targets);
/// Mean binary cross-entropy of sigmoid(logits) against labels in {0, 1}.
Tensor binary_cross_entropy_with_logits(const Tensor& logits,
                                        const std::vector<double>& labels);
/// Mean squared error.
Tensor mse(const Tensor& a, const Tensor& b);

}  // namespace ops

}  // namespace imad
