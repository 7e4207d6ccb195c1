#include "gsae/autograd.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace gsae::ag {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
using ImplPtr = std::shared_ptr<detail::TensorImpl<T>>;

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) +
                   " and " + shape_str(b));
}

[[noreturn]] void shape_fail(const char* op, const Shape& a,
                             const std::string& why) {
  throw ShapeError(std::string(op) + ": " + why + " (got " + shape_str(a) + ")");
}

template <typename T>
bool needs_grad(const ImplPtr<T>& p) {
  return p->requires_grad;
}

// Builds the output tensor; attaches a graph node only when some input needs
// a gradient.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* op,
                      std::vector<ImplPtr<T>> inputs,
                      std::function<void(const detail::TensorImpl<T>&)> bw) {
  auto impl = std::make_shared<detail::TensorImpl<T>>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const ImplPtr<T>& p) { return needs_grad(p); });
  if (any) {
    impl->requires_grad = true;
    auto node = std::make_shared<detail::Node<T>>();
    node->op = op;
    node->inputs = std::move(inputs);
    node->backward = std::move(bw);
    impl->node = std::move(node);
  }
  return Tensor<T>::wrap(std::move(impl));
}

enum class Broadcast { kSame, kScalarA, kScalarB, kRowA, kRowB };

Broadcast resolve_broadcast(const char* op, const Shape& a, const Shape& b) {
  if (a == b) return Broadcast::kSame;
  const std::size_t na = numel(a), nb = numel(b);
  if (nb == 1 && b.size() <= 1) return Broadcast::kScalarB;
  if (na == 1 && a.size() <= 1) return Broadcast::kScalarA;
  if (a.size() == 2 && b.size() == 1 && b[0] == a[1]) return Broadcast::kRowB;
  if (b.size() == 2 && a.size() == 1 && a[0] == b[1]) return Broadcast::kRowA;
  shape_fail(op, a, b);
}

// Index into the broadcast operand for output flat index i.
inline std::size_t bidx(Broadcast mode, bool is_a, std::size_t i,
                        std::size_t cols) {
  switch (mode) {
    case Broadcast::kSame:
      return i;
    case Broadcast::kScalarA:
      return is_a ? 0 : i;
    case Broadcast::kScalarB:
      return is_a ? i : 0;
    case Broadcast::kRowA:
      return is_a ? i % cols : i;
    case Broadcast::kRowB:
      return is_a ? i : i % cols;
  }
  return i;
}

template <typename T, typename Fwd, typename DA, typename DB>
Tensor<T> binary(const char* op, const Tensor<T>& a, const Tensor<T>& b,
                 Fwd fwd, DA da, DB db) {
  const Broadcast mode = resolve_broadcast(op, a.shape(), b.shape());
  const Shape out_shape =
      (mode == Broadcast::kScalarA || mode == Broadcast::kRowA) ? b.shape()
                                                                 : a.shape();
  const std::size_t n = numel(out_shape);
  const std::size_t cols = out_shape.empty() ? 1 : out_shape.back();
  std::vector<T> out(n);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = fwd(ad[bidx(mode, true, i, cols)], bd[bidx(mode, false, i, cols)]);
  }
  auto pa = a.impl(), pb = b.impl();
  return make_result<T>(
      out_shape, std::move(out), op, {pa, pb},
      [pa, pb, mode, n, cols, da, db](const detail::TensorImpl<T>& o) {
        if (pa->requires_grad) {
          pa->accumulate_grad_storage();
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t ia = bidx(mode, true, i, cols);
            const std::size_t ib = bidx(mode, false, i, cols);
            pa->grad[ia] += da(o.grad[i], pa->data[ia], pb->data[ib]);
          }
        }
        if (pb->requires_grad) {
          pb->accumulate_grad_storage();
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t ia = bidx(mode, true, i, cols);
            const std::size_t ib = bidx(mode, false, i, cols);
            pb->grad[ib] += db(o.grad[i], pa->data[ia], pb->data[ib]);
          }
        }
      });
}

template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const char* op, const Tensor<T>& a, Fwd fwd, Deriv deriv) {
  const auto ad = a.data();
  std::vector<T> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = fwd(ad[i]);
  auto pa = a.impl();
  return make_result<T>(a.shape(), std::move(out), op, {pa},
                        [pa, deriv](const detail::TensorImpl<T>& o) {
                          pa->accumulate_grad_storage();
                          for (std::size_t i = 0; i < o.grad.size(); ++i) {
                            pa->grad[i] += o.grad[i] * deriv(pa->data[i]);
                          }
                        });
}

template <typename T>
void require_rank2(const char* op, const Tensor<T>& a) {
  if (a.rank() != 2) shape_fail(op, a.shape(), "expected a rank-2 tensor");
}

// Rows x last-dim view used by the row-wise ops; rank 1 is a single row.
template <typename T>
std::pair<std::size_t, std::size_t> rows_cols(const char* op,
                                              const Tensor<T>& a) {
  if (a.rank() == 1) return {1, a.shape()[0]};
  if (a.rank() == 2) return {a.shape()[0], a.shape()[1]};
  shape_fail(op, a.shape(), "expected rank 1 or 2");
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

template <typename T>
Tensor<T>::Tensor(Shape shape, bool requires_grad)
    : impl_(std::make_shared<Impl>()) {
  impl_->data.assign(numel(shape), T(0));
  impl_->shape = std::move(shape);
  impl_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad)
    : impl_(std::make_shared<Impl>()) {
  if (data.size() != numel(shape)) {
    throw ShapeError("tensor: data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::vector(std::vector<T> values, bool requires_grad) {
  const std::size_t n = values.size();
  return Tensor(Shape{n}, std::move(values), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::matrix(std::size_t rows, std::size_t cols,
                            std::vector<T> values, bool requires_grad) {
  return Tensor(Shape{rows, cols}, std::move(values), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::wrap(std::shared_ptr<Impl> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

template <typename T>
std::size_t Tensor<T>::rows() const {
  return rank() == 2 ? impl_->shape[0] : 1;
}

template <typename T>
std::size_t Tensor<T>::cols() const {
  return rank() == 0 ? 1 : impl_->shape.back();
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) {
    throw ShapeError("item: tensor is not a scalar " + shape_str(shape()));
  }
  return impl_->data[0];
}

template <typename T>
void Tensor<T>::set_requires_grad(bool value) {
  if (impl_->node) {
    throw std::logic_error("set_requires_grad: only valid on leaf tensors");
  }
  impl_->requires_grad = value;
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(impl_->shape, impl_->data, false);
}

template <typename T>
void Tensor<T>::backward(T seed) const {
  if (size() != 1) {
    throw ShapeError("backward: output must be a scalar, got " +
                     shape_str(shape()));
  }
  if (!impl_->requires_grad) {
    throw std::logic_error("backward: output does not depend on any tensor "
                           "that requires a gradient");
  }

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<Impl*> order;
  std::unordered_set<const Impl*> visited;
  std::vector<std::pair<Impl*, std::size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [cur, next] = stack.back();
    if (cur->node && next < cur->node->inputs.size()) {
      Impl* child = cur->node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(cur);
    stack.pop_back();
  }

  impl_->accumulate_grad_storage();
  impl_->grad[0] += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* cur = *it;
    if (cur->node && !cur->grad.empty()) cur->node->backward(*cur);
  }
  for (Impl* cur : order) cur->node.reset();
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      "add", a, b, [](T x, T y) { return x + y; },
      [](T g, T, T) { return g; }, [](T g, T, T) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; },
      [](T g, T, T) { return g; }, [](T g, T, T) { return -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; },
      [](T g, T, T y) { return g * y; }, [](T g, T x, T) { return g * x; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return unary<T>(
      "scale", a, [factor](T x) { return x * factor; },
      [factor](T) { return factor; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary<T>(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  return unary<T>(
      "gelu", a,
      [](T x) {
        return T(0.5) * x * (T(1) + std::tanh(kC * (x + kA * x * x * x)));
      },
      [](T x) {
        const T u = kC * (x + kA * x * x * x);
        const T t = std::tanh(u);
        const T du = kC * (T(1) + T(3) * kA * x * x);
        return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
      });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
  return unary<T>(
      "abs", a, [](T x) { return std::abs(x); },
      [](T x) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    shape_fail("matmul", a.shape(), b.shape());
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<T> out(m * n);
  MapMat<T>(out.data(), m, n).noalias() =
      ConstMapMat<T>(a.data().data(), m, k) * ConstMapMat<T>(b.data().data(), k, n);
  auto pa = a.impl(), pb = b.impl();
  return make_result<T>(
      Shape{m, n}, std::move(out), "matmul", {pa, pb},
      [pa, pb, m, k, n](const detail::TensorImpl<T>& o) {
        ConstMapMat<T> dc(o.grad.data(), m, n);
        if (pa->requires_grad) {
          pa->accumulate_grad_storage();
          MapMat<T>(pa->grad.data(), m, k).noalias() +=
              dc * ConstMapMat<T>(pb->data.data(), k, n).transpose();
        }
        if (pb->requires_grad) {
          pb->accumulate_grad_storage();
          MapMat<T>(pb->grad.data(), k, n).noalias() +=
              ConstMapMat<T>(pa->data.data(), m, k).transpose() * dc;
        }
      });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_rank2("transpose", a);
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<T> out(m * n);
  MapMat<T>(out.data(), n, m) = ConstMapMat<T>(a.data().data(), m, n).transpose();
  auto pa = a.impl();
  return make_result<T>(Shape{n, m}, std::move(out), "transpose", {pa},
                        [pa, m, n](const detail::TensorImpl<T>& o) {
                          pa->accumulate_grad_storage();
                          MapMat<T>(pa->grad.data(), m, n) +=
                              ConstMapMat<T>(o.grad.data(), n, m).transpose();
                        });
}

// ---------------------------------------------------------------------------
// Normalization and probabilities

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, T eps) {
  const auto [rows, d] = rows_cols("layer_norm", x);
  if (gain.rank() != 1 || gain.size() != d || bias.rank() != 1 || bias.size() != d) {
    shape_fail("layer_norm", x.shape(), gain.shape());
  }
  std::vector<T> out(rows * d), xhat(rows * d), inv_std(rows);
  const auto xd = x.data();
  const auto gd = gain.data();
  const auto bd = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xd.data() + r * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= T(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= T(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mu) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gd[j] + bd[j];
    }
  }
  auto px = x.impl(), pg = gain.impl(), pb = bias.impl();
  return make_result<T>(
      x.shape(), std::move(out), "layer_norm", {px, pg, pb},
      [px, pg, pb, rows, d, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](const detail::TensorImpl<T>& o) {
        if (pg->requires_grad) pg->accumulate_grad_storage();
        if (pb->requires_grad) pb->accumulate_grad_storage();
        if (px->requires_grad) px->accumulate_grad_storage();
        std::vector<T> dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* dy = o.grad.data() + r * d;
          const T* h = xhat.data() + r * d;
          T mean_dxhat = 0, mean_dxhat_h = 0;
          for (std::size_t j = 0; j < d; ++j) {
            if (pg->requires_grad) pg->grad[j] += dy[j] * h[j];
            if (pb->requires_grad) pb->grad[j] += dy[j];
            dxhat[j] = dy[j] * pg->data[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_h += dxhat[j] * h[j];
          }
          if (!px->requires_grad) continue;
          mean_dxhat /= T(d);
          mean_dxhat_h /= T(d);
          T* dx = px->grad.data() + r * d;
          for (std::size_t j = 0; j < d; ++j) {
            dx[j] += inv_std[r] * (dxhat[j] - mean_dxhat - h[j] * mean_dxhat_h);
          }
        }
      });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
  const auto [rows, n] = rows_cols("softmax", a);
  std::vector<T> out(rows * n);
  const auto ad = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = ad.data() + r * n;
    T* y = out.data() + r * n;
    const T mx = *std::max_element(in, in + n);
    T z = 0;
    for (std::size_t j = 0; j < n; ++j) z += (y[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < n; ++j) y[j] /= z;
  }
  auto pa = a.impl();
  auto y = std::make_shared<std::vector<T>>(out);
  return make_result<T>(a.shape(), std::move(out), "softmax", {pa},
                        [pa, y, rows, n](const detail::TensorImpl<T>& o) {
                          pa->accumulate_grad_storage();
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T* yr = y->data() + r * n;
                            const T* dy = o.grad.data() + r * n;
                            T dot = 0;
                            for (std::size_t j = 0; j < n; ++j) dot += dy[j] * yr[j];
                            T* dx = pa->grad.data() + r * n;
                            for (std::size_t j = 0; j < n; ++j) {
                              dx[j] += yr[j] * (dy[j] - dot);
                            }
                          }
                        });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a) {
  const auto [rows, n] = rows_cols("log_softmax", a);
  std::vector<T> out(rows * n);
  auto probs = std::make_shared<std::vector<T>>(rows * n);
  const auto ad = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = ad.data() + r * n;
    const T mx = *std::max_element(in, in + n);
    T z = 0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(in[j] - mx);
    const T lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) {
      out[r * n + j] = in[j] - lse;
      (*probs)[r * n + j] = std::exp(in[j] - lse);
    }
  }
  auto pa = a.impl();
  return make_result<T>(a.shape(), std::move(out), "log_softmax", {pa},
                        [pa, probs, rows, n](const detail::TensorImpl<T>& o) {
                          pa->accumulate_grad_storage();
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T* dy = o.grad.data() + r * n;
                            T total = 0;
                            for (std::size_t j = 0; j < n; ++j) total += dy[j];
                            T* dx = pa->grad.data() + r * n;
                            for (std::size_t j = 0; j < n; ++j) {
                              dx[j] += dy[j] - (*probs)[r * n + j] * total;
                            }
                          }
                        });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets) {
  require_rank2("cross_entropy", logits);
  const std::size_t rows = logits.shape()[0], n = logits.shape()[1];
  if (targets.size() != rows || rows == 0) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) +
                     " targets for logits " + shape_str(logits.shape()));
  }
  auto probs = std::make_shared<std::vector<T>>(rows * n);
  auto tgt = std::make_shared<std::vector<int>>(targets.begin(), targets.end());
  const auto ld = logits.data();
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= n) {
      throw ShapeError("cross_entropy: target " + std::to_string(t) +
                       " out of range for " + std::to_string(n) + " classes");
    }
    const T* in = ld.data() + r * n;
    const T mx = *std::max_element(in, in + n);
    T z = 0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(in[j] - mx);
    const T lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) (*probs)[r * n + j] = std::exp(in[j] - lse);
    total += lse - in[t];
  }
  auto pl = logits.impl();
  return make_result<T>(
      Shape{}, std::vector<T>{total / T(rows)}, "cross_entropy", {pl},
      [pl, probs, tgt, rows, n](const detail::TensorImpl<T>& o) {
        pl->accumulate_grad_storage();
        const T g = o.grad[0] / T(rows);
        for (std::size_t r = 0; r < rows; ++r) {
          T* dx = pl->grad.data() + r * n;
          const T* p = probs->data() + r * n;
          for (std::size_t j = 0; j < n; ++j) dx[j] += g * p[j];
          dx[(*tgt)[r]] -= g;
        }
      });
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids) {
  require_rank2("embedding", table);
  const std::size_t vocab = table.shape()[0], d = table.shape()[1];
  std::vector<T> out(ids.size() * d);
  const auto td = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw ShapeError("embedding: id " + std::to_string(ids[i]) +
                       " out of range for table " + shape_str(table.shape()));
    }
    std::copy_n(td.data() + ids[i] * d, d, out.data() + i * d);
  }
  auto pt = table.impl();
  auto idv = std::make_shared<std::vector<int>>(ids.begin(), ids.end());
  return make_result<T>(Shape{ids.size(), d}, std::move(out), "embedding", {pt},
                        [pt, idv, d](const detail::TensorImpl<T>& o) {
                          pt->accumulate_grad_storage();
                          for (std::size_t i = 0; i < idv->size(); ++i) {
                            T* dst = pt->grad.data() + (*idv)[i] * d;
                            const T* src = o.grad.data() + i * d;
                            for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                          }
                        });
}

// ---------------------------------------------------------------------------
// Structural

template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t row_begin, std::size_t row_end,
                std::size_t col_begin, std::size_t col_end) {
  require_rank2("slice", a);
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  if (row_begin > row_end || row_end > m || col_begin > col_end || col_end > n) {
    shape_fail("slice", a.shape(),
               "range [" + std::to_string(row_begin) + ":" +
                   std::to_string(row_end) + ", " + std::to_string(col_begin) +
                   ":" + std::to_string(col_end) + ") out of bounds");
  }
  const std::size_t r = row_end - row_begin, c = col_end - col_begin;
  std::vector<T> out(r * c);
  MapMat<T>(out.data(), r, c) =
      ConstMapMat<T>(a.data().data(), m, n).block(row_begin, col_begin, r, c);
  auto pa = a.impl();
  return make_result<T>(Shape{r, c}, std::move(out), "slice", {pa},
                        [pa, m, n, r, c, row_begin, col_begin](
                            const detail::TensorImpl<T>& o) {
                          pa->accumulate_grad_storage();
                          MapMat<T>(pa->grad.data(), m, n)
                              .block(row_begin, col_begin, r, c) +=
                              ConstMapMat<T>(o.grad.data(), r, c);
                        });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  if (axis != 0 && axis != 1) throw ShapeError("concat: axis must be 0 or 1");
  for (const auto& p : parts) require_rank2("concat", p);
  const std::size_t fixed = parts[0].shape()[1 - axis];
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.shape()[1 - axis] != fixed) shape_fail("concat", parts[0].shape(), p.shape());
    total += p.shape()[axis];
  }
  const std::size_t m = axis == 0 ? total : fixed;
  const std::size_t n = axis == 0 ? fixed : total;
  std::vector<T> out(m * n);
  MapMat<T> om(out.data(), m, n);
  std::vector<std::shared_ptr<detail::TensorImpl<T>>> inputs;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t pr = p.shape()[0], pc = p.shape()[1];
    ConstMapMat<T> pm(p.data().data(), pr, pc);
    if (axis == 0) {
      om.block(off, 0, pr, pc) = pm;
    } else {
      om.block(0, off, pr, pc) = pm;
    }
    offsets.push_back(off);
    off += p.shape()[axis];
    inputs.push_back(p.impl());
  }
  auto ins = inputs;
  return make_result<T>(
      Shape{m, n}, std::move(out), "concat", std::move(inputs),
      [ins, offsets, axis, m, n](const detail::TensorImpl<T>& o) {
        ConstMapMat<T> g(o.grad.data(), m, n);
        for (std::size_t i = 0; i < ins.size(); ++i) {
          auto& p = ins[i];
          if (!p->requires_grad) continue;
          p->accumulate_grad_storage();
          const std::size_t pr = p->shape[0], pc = p->shape[1];
          MapMat<T> pg(p->grad.data(), pr, pc);
          if (axis == 0) {
            pg += g.block(offsets[i], 0, pr, pc);
          } else {
            pg += g.block(0, offsets[i], pr, pc);
          }
        }
      });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  const auto ad = a.data();
  T total = 0;
  for (T v : ad) total += v;
  auto pa = a.impl();
  return make_result<T>(Shape{}, std::vector<T>{total}, "sum", {pa},
                        [pa](const detail::TensorImpl<T>& o) {
                          pa->accumulate_grad_storage();
                          for (T& g : pa->grad) g += o.grad[0];
                        });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.size() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), T(1) / T(a.size()));
}

template <typename T>
Tensor<T> causal_mask(const Tensor<T>& scores) {
  require_rank2("causal_mask", scores);
  const std::size_t n = scores.shape()[0];
  if (scores.shape()[1] != n) shape_fail("causal_mask", scores.shape(), "expected square scores");
  std::vector<T> out(scores.data().begin(), scores.data().end());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      out[i * n + j] = -std::numeric_limits<T>::infinity();
    }
  }
  auto pa = scores.impl();
  return make_result<T>(scores.shape(), std::move(out), "causal_mask", {pa},
                        [pa, n](const detail::TensorImpl<T>& o) {
                          pa->accumulate_grad_storage();
                          for (std::size_t i = 0; i < n; ++i) {
                            for (std::size_t j = 0; j <= i; ++j) {
                              pa->grad[i * n + j] += o.grad[i * n + j];
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Gradient checking

template <typename T>
GradCheckResult grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& fn,
                           const Tensor<T>& point, double epsilon) {
  GradCheckResult result;
  Tensor<T> x(point.shape(), std::vector<T>(point.data().begin(), point.data().end()),
              true);
  Tensor<T> y = fn(x);
  if (!std::isfinite(static_cast<double>(y.item()))) {
    result.finite = false;
    result.non_finite_index = 0;
    return result;
  }
  y.backward();
  std::vector<T> analytic = x.has_grad()
                                ? std::vector<T>(x.grad().begin(), x.grad().end())
                                : std::vector<T>(x.size(), T(0));

  std::vector<T> probe(point.data().begin(), point.data().end());
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const T orig = probe[i];
    probe[i] = orig + T(epsilon);
    const double fp = static_cast<double>(fn(Tensor<T>(point.shape(), probe)).item());
    probe[i] = orig - T(epsilon);
    const double fm = static_cast<double>(fn(Tensor<T>(point.shape(), probe)).item());
    probe[i] = orig;
    const double numeric = (fp - fm) / (2.0 * epsilon);
    const double a = static_cast<double>(analytic[i]);
    if (!std::isfinite(numeric) || !std::isfinite(a)) {
      result.finite = false;
      result.non_finite_index = i;
      result.worst_index = i;
      result.max_relative_error = std::numeric_limits<double>::infinity();
      return result;
    }
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    const double rel = std::abs(a - numeric) / denom;
    if (rel > result.max_relative_error) {
      result.max_relative_error = rel;
      result.worst_index = i;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Explicit instantiations

#define GSAE_INSTANTIATE(T)                                                      \
  template class Tensor<T>;                                                      \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> scale(const Tensor<T>&, T);                                 \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> transpose(const Tensor<T>&);                                \
  template Tensor<T> relu(const Tensor<T>&);                                     \
  template Tensor<T> gelu(const Tensor<T>&);                                     \
  template Tensor<T> abs(const Tensor<T>&);                                      \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&,              \
                                const Tensor<T>&, T);                            \
  template Tensor<T> softmax(const Tensor<T>&);                                  \
  template Tensor<T> log_softmax(const Tensor<T>&);                              \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>);      \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const int>);          \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t,           \
                           std::size_t, std::size_t);                            \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                 \
  template Tensor<T> sum(const Tensor<T>&);                                      \
  template Tensor<T> mean(const Tensor<T>&);                                     \
  template Tensor<T> causal_mask(const Tensor<T>&);                              \
  template GradCheckResult grad_check(                                           \
      const std::function<Tensor<T>(const Tensor<T>&)>&, const Tensor<T>&, double);

GSAE_INSTANTIATE(float)
GSAE_INSTANTIATE(double)

#undef GSAE_INSTANTIATE

}  // namespace gsae::ag
