#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// tensors. The graph is built eagerly as ops are applied and released after
// backward(); there is no support for higher-order derivatives.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace gsae::ag {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Thrown when an op receives operands whose shapes it cannot combine.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

template <typename T>
struct TensorImpl;

template <typename T>
struct Node {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  // Reads out.grad and accumulates into the inputs' grad buffers.
  std::function<void(const TensorImpl<T>& out)> backward;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient reaches this tensor
  bool requires_grad = false;
  std::shared_ptr<Node<T>> node;

  void accumulate_grad_storage() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Impl = detail::TensorImpl<T>;

  Tensor() = default;
  /// Zero-filled tensor.
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static Tensor scalar(T value, bool requires_grad = false);
  static Tensor vector(std::vector<T> values, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<T> values, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t size() const { return impl_->data.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const T> data() const { return impl_->data; }
  std::span<T> mutable_data() { return impl_->data; }
  T item() const;
  T at(std::size_t i) const { return impl_->data[i]; }
  T at(std::size_t r, std::size_t c) const { return impl_->data[r * cols() + c]; }

  bool requires_grad() const { return impl_->requires_grad; }
  /// Marks a leaf as a gradient sink. Only valid on tensors without a graph.
  void set_requires_grad(bool value);

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  void zero_grad();

  bool has_graph() const { return impl_->node != nullptr; }

  /// Backpropagates from a scalar output; gradients accumulate additively into
  /// every tensor on the graph that requires them. The graph is released
  /// afterwards.
  void backward(T seed = T(1)) const;

  /// Copy of the values with no graph and no gradient tracking.
  Tensor detach() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  const std::shared_ptr<Impl>& impl() const { return impl_; }
  static Tensor wrap(std::shared_ptr<Impl> impl);

 private:
  std::shared_ptr<Impl> impl_;
};

// Elementwise ops accept identical shapes, a scalar on either side, or a
// rank-1 operand whose length matches the last dimension of a rank-2 operand
// (broadcast across rows).
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);

/// Rank-2 matrix product [m, k] x [k, n] -> [m, n].
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> transpose(const Tensor<T>& a);

template <typename T> Tensor<T> relu(const Tensor<T>& a);
/// GPT-2 tanh approximation.
template <typename T> Tensor<T> gelu(const Tensor<T>& a);
template <typename T> Tensor<T> abs(const Tensor<T>& a);

/// Normalizes over the last dimension, then applies gain and bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, T eps = T(1e-5));

/// Row-wise over the last dimension.
template <typename T> Tensor<T> softmax(const Tensor<T>& a);
template <typename T> Tensor<T> log_softmax(const Tensor<T>& a);

/// Mean over rows of -log softmax(logits)[row, targets[row]].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets);

/// Gathers rows of `table` ([V, d]) -> [ids.size(), d].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids);

/// Rank-2 block [row_begin, row_end) x [col_begin, col_end).
template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t row_begin, std::size_t row_end,
                std::size_t col_begin, std::size_t col_end);
/// Rank-2 concatenation along axis 0 (rows) or 1 (columns).
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);

template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);

/// Square [n, n] scores; entries above the diagonal become -inf.
template <typename T> Tensor<T> causal_mask(const Tensor<T>& scores);

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  bool finite = true;
  // Set when a non-finite value was encountered.
  std::optional<std::size_t> non_finite_index;
};

/// Compares backward() against central differences (f(x+e) - f(x-e)) / 2e
/// coordinate by coordinate. Relative error is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
template <typename T>
GradCheckResult grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& fn,
                           const Tensor<T>& point, double epsilon = 1e-5);

}  // namespace gsae::ag
