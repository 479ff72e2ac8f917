#pragma once

// Dense row-major tensors with a tape-free reverse-mode autodiff graph.
//
// Every op returns a new Tensor whose node keeps shared references to its
// inputs and a closure that scatters the output gradient back into them.
// The graph lives exactly as long as the last handle to its output.
//
// Shapes are arbitrary rank, but ops treat a tensor as a matrix of
// rows() x cols() where cols() is the last dimension.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <type_traits>

#ifdef MTP_USE_CBLAS
#include <cblas.h>
#endif
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mtp/error.hpp"

namespace mtp {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(const Node&)> backward_fn;
  bool requires_grad = false;
  const char* op = "leaf";

  bool is_leaf() const { return inputs.empty(); }

  std::vector<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T{0});
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto size = shape_size(shape);
    return from(std::move(shape), std::vector<T>(size, T{0}), requires_grad);
  }

  static Tensor from(Shape shape, std::vector<T> values,
                     bool requires_grad = false) {
    if (shape_size(shape) != values.size()) {
      fail("tensor: shape ", shape_string(shape), " needs ", shape_size(shape),
           " values, got ", values.size());
    }
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->value.size(); }
  std::size_t cols() const { return node_->shape.empty() ? 1 : node_->shape.back(); }
  std::size_t rows() const { return cols() == 0 ? 0 : size() / cols(); }
  bool requires_grad() const { return node_->requires_grad; }
  const char* op() const { return node_->op; }

  std::span<const T> values() const { return node_->value; }
  std::span<T> mutable_values() { return node_->value; }
  T operator[](std::size_t i) const { return node_->value[i]; }
  T at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }

  T item() const {
    if (size() != 1) fail("item: tensor of shape ", shape_string(shape()), " is not scalar");
    return node_->value[0];
  }

  // Gradient buffer; empty span until a backward pass reaches this node.
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T{0}); }

  Node<T>& node() const { return *node_; }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T>
Tensor<T> make_op(const char* op, Shape shape, std::vector<T> value,
                  std::vector<std::shared_ptr<Node<T>>> inputs,
                  std::function<void(const Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->op = op;
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = std::any_of(inputs.begin(), inputs.end(),
                           [](const auto& in) { return in->requires_grad; });
  if (needs) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    fail(op, ": shape mismatch ", shape_string(a.shape()), " vs ",
         shape_string(b.shape()));
  }
}

#ifdef MTP_USE_CBLAS
// One BLAS thread: partitioned reductions would make float sums depend on
// the thread count, and runs must be bit-reproducible.
inline void blas_single_thread() {
  static const bool once = [] {
    openblas_set_num_threads(1);
    return true;
  }();
  (void)once;
}
#endif

// Row-major C[m,n] += op(A) * op(B) with explicit leading dimensions.
template <typename T>
void gemm_strided(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const T* a,
                  std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc) {
  if (m == 0 || n == 0 || k == 0) return;
#ifdef MTP_USE_CBLAS
  if constexpr (std::is_same_v<T, float> || std::is_same_v<T, double>) {
    blas_single_thread();
    const auto opa = ta ? CblasTrans : CblasNoTrans;
    const auto opb = tb ? CblasTrans : CblasNoTrans;
    if constexpr (std::is_same_v<T, float>)
      cblas_sgemm(CblasRowMajor, opa, opb, int(m), int(n), int(k), 1.0f, a, int(lda), b, int(ldb), 1.0f, c,
                  int(ldc));
    else
      cblas_dgemm(CblasRowMajor, opa, opb, int(m), int(n), int(k), 1.0, a, int(lda), b, int(ldb), 1.0, c,
                  int(ldc));
    return;
  }
#endif
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * ldc;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ta ? a[p * lda + i] : a[i * lda + p];
      if (av == T{0}) continue;
      if (tb) {
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * b[j * ldb + p];
      } else {
        const T* brow = b + p * ldb;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

template <typename T>
bool blas_gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda,
               const T* b, std::size_t ldb, T* c) {
#ifdef MTP_USE_CBLAS
  if constexpr (std::is_same_v<T, float> || std::is_same_v<T, double>) {
    gemm_strided(ta, tb, m, n, k, a, lda, b, ldb, c, n);
    return true;
  }
#endif
  (void)ta, (void)tb, (void)m, (void)n, (void)k, (void)a, (void)lda, (void)b, (void)ldb, (void)c;
  return false;
}

// c[m,n] += a[m,k] * b[k,n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
             std::size_t n) {
  if (blas_gemm(false, false, m, n, k, a, k, b, n, c)) return;
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      T av = arow[p];
      if (av == T{0}) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,n] += a[m,k] * b[n,k]^T. Without BLAS, copying b^T once lets the inner
// loop run over contiguous output columns, which vectorizes.
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
             std::size_t n) {
  if (blas_gemm(false, true, m, n, k, a, k, b, k, c)) return;
  std::vector<T> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_nn(a, bt.data(), c, m, k, n);
}

// c[k,n] += a[m,k]^T * b[m,n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
             std::size_t n) {
  if (blas_gemm(true, false, k, n, m, a, k, b, n, c)) return;
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      T av = arow[p];
      if (av == T{0}) continue;
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

// Reverse-mode sweep from a scalar. Leaf gradients accumulate across calls;
// interior gradients are reset on every call.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.size() != 1) {
    fail("backward: loss must be scalar, got shape ", shape_string(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{&loss.node(), 0}};
  seen.insert(&loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node<T>* node : order) {
    if (!node->is_leaf()) node->grad.assign(node->value.size(), T{0});
  }
  loss.node().ensure_grad()[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward_fn) node->backward_fn(*node);
  }
}

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("add", a, b);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  auto na = a.node_ptr(), nb = b.node_ptr();
  return detail::make_op<T>("add", a.shape(), std::move(out), {na, nb},
                            [na, nb](const Node<T>& o) {
                              for (auto* n : {na.get(), nb.get()}) {
                                if (!n->requires_grad) continue;
                                auto& g = n->ensure_grad();
                                for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                              }
                            });
}

// a[r,c] + bias[c] broadcast over rows.
template <typename T>
Tensor<T> add_row(const Tensor<T>& a, const Tensor<T>& bias) {
  const std::size_t c = a.cols();
  if (bias.size() != c) {
    fail("add_row: bias ", shape_string(bias.shape()), " does not match columns of ",
         shape_string(a.shape()));
  }
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + bias[i % c];
  auto na = a.node_ptr(), nb = bias.node_ptr();
  return detail::make_op<T>("add_row", a.shape(), std::move(out), {na, nb},
                            [na, nb, c](const Node<T>& o) {
                              if (na->requires_grad) {
                                auto& g = na->ensure_grad();
                                for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                              }
                              if (nb->requires_grad) {
                                auto& g = nb->ensure_grad();
                                for (std::size_t i = 0; i < o.grad.size(); ++i) g[i % c] += o.grad[i];
                              }
                            });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  auto na = a.node_ptr(), nb = b.node_ptr();
  return detail::make_op<T>("mul", a.shape(), std::move(out), {na, nb},
                            [na, nb](const Node<T>& o) {
                              if (na->requires_grad) {
                                auto& g = na->ensure_grad();
                                for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * nb->value[i];
                              }
                              if (nb->requires_grad) {
                                auto& g = nb->ensure_grad();
                                for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * na->value[i];
                              }
                            });
}

// scale * a + shift
template <typename T>
Tensor<T> affine(const Tensor<T>& a, T scale, T shift = T{0}) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * a[i] + shift;
  auto na = a.node_ptr();
  return detail::make_op<T>("affine", a.shape(), std::move(out), {na},
                            [na, scale](const Node<T>& o) {
                              auto& g = na->ensure_grad();
                              for (std::size_t i = 0; i < g.size(); ++i) g[i] += scale * o.grad[i];
                            });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  const T kC = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  const T kK = static_cast<T>(0.044715);
  std::vector<T> out(a.size()), th(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = a[i];
    th[i] = std::tanh(kC * (x + kK * x * x * x));
    out[i] = T{0.5} * x * (T{1} + th[i]);
  }
  auto na = a.node_ptr();
  return detail::make_op<T>("gelu", a.shape(), std::move(out), {na},
                            [na, kC, kK, th = std::move(th)](const Node<T>& o) {
                              auto& g = na->ensure_grad();
                              for (std::size_t i = 0; i < g.size(); ++i) {
                                const T x = na->value[i], t = th[i];
                                const T d = T{0.5} * (T{1} + t) +
                                            T{0.5} * x * (T{1} - t * t) * kC * (T{1} + T{3} * kK * x * x);
                                g[i] += d * o.grad[i];
                              }
                            });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a[i]);
  auto na = a.node_ptr();
  auto result = detail::make_op<T>("tanh", a.shape(), std::move(out), {na}, nullptr);
  if (result.requires_grad()) {
    Node<T>* self = &result.node();
    self->backward_fn = [na](const Node<T>& o) {
      auto& g = na->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += (T{1} - o.value[i] * o.value[i]) * o.grad[i];
    };
  }
  return result;
}

// log(clamp(a, lo, hi)); zero gradient where the clamp is active.
template <typename T>
Tensor<T> log_clamped(const Tensor<T>& a, T lo, T hi) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(std::clamp(a[i], lo, hi));
  auto na = a.node_ptr();
  return detail::make_op<T>("log_clamped", a.shape(), std::move(out), {na},
                            [na, lo, hi](const Node<T>& o) {
                              auto& g = na->ensure_grad();
                              for (std::size_t i = 0; i < g.size(); ++i) {
                                T x = na->value[i];
                                if (x > lo && x < hi) g[i] += o.grad[i] / x;
                              }
                            });
}

// Inverted dropout: survivors are scaled by 1/(1-p) so eval needs no rescale.
template <typename T, typename Rng>
Tensor<T> dropout(const Tensor<T>& a, double p, Rng& rng, bool training) {
  if (!training || p <= 0.0) return a;
  if (p >= 1.0) fail("dropout: p must be < 1, got ", p);
  std::bernoulli_distribution keep(1.0 - p);
  const T scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(a.size());
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = keep(rng) ? scale : T{0};
    out[i] = a[i] * mask[i];
  }
  auto na = a.node_ptr();
  return detail::make_op<T>("dropout", a.shape(), std::move(out), {na},
                            [na, mask = std::move(mask)](const Node<T>& o) {
                              auto& g = na->ensure_grad();
                              for (std::size_t i = 0; i < g.size(); ++i) g[i] += mask[i] * o.grad[i];
                            });
}

// ------------------------------------------------------------------- matrices

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (b.shape().size() != 2 || a.cols() != b.shape()[0]) {
    fail("matmul: shape mismatch ", shape_string(a.shape()), " x ", shape_string(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<T> out(m * n, T{0});
  detail::gemm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
  auto na = a.node_ptr(), nb = b.node_ptr();
  return detail::make_op<T>("matmul", {m, n}, std::move(out), {na, nb},
                            [na, nb, m, k, n](const Node<T>& o) {
                              if (na->requires_grad) {
                                detail::gemm_nt(o.grad.data(), nb->value.data(),
                                                na->ensure_grad().data(), m, n, k);
                              }
                              if (nb->requires_grad) {
                                detail::gemm_tn(na->value.data(), o.grad.data(),
                                                nb->ensure_grad().data(), m, k, n);
                              }
                            });
}

// a[m,k] * b[n,k]^T -> [m,n]
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (b.shape().size() != 2 || a.cols() != b.cols()) {
    fail("matmul_nt: shape mismatch ", shape_string(a.shape()), " x ",
         shape_string(b.shape()), "^T");
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  std::vector<T> out(m * n, T{0});
  detail::gemm_nt(a.values().data(), b.values().data(), out.data(), m, k, n);
  auto na = a.node_ptr(), nb = b.node_ptr();
  return detail::make_op<T>("matmul_nt", {m, n}, std::move(out), {na, nb},
                            [na, nb, m, k, n](const Node<T>& o) {
                              if (na->requires_grad) {
                                detail::gemm_nn(o.grad.data(), nb->value.data(),
                                                na->ensure_grad().data(), m, n, k);
                              }
                              if (nb->requires_grad) {
                                detail::gemm_tn(o.grad.data(), na->value.data(),
                                                nb->ensure_grad().data(), m, n, k);
                              }
                            });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
  auto na = a.node_ptr();
  return detail::make_op<T>("transpose", {c, r}, std::move(out), {na},
                            [na, r, c](const Node<T>& o) {
                              auto& g = na->ensure_grad();
                              for (std::size_t i = 0; i < r; ++i)
                                for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[j * r + i];
                            });
}

namespace detail {

template <typename T>
Tensor<T> softmax_last(const Tensor<T>& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < r; ++i) {
    const T* x = a.values().data() + i * c;
    T* y = out.data() + i * c;
    T mx = *std::max_element(x, x + c);
    T sum{0};
    for (std::size_t j = 0; j < c; ++j) sum += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < c; ++j) y[j] /= sum;
  }
  auto na = a.node_ptr();
  auto result = make_op<T>("softmax", a.shape(), std::move(out), {na}, nullptr);
  if (result.requires_grad()) {
    result.node().backward_fn = [na, r, c](const Node<T>& o) {
      auto& g = na->ensure_grad();
      for (std::size_t i = 0; i < r; ++i) {
        const T* y = o.value.data() + i * c;
        const T* dy = o.grad.data() + i * c;
        T dot{0};
        for (std::size_t j = 0; j < c; ++j) dot += y[j] * dy[j];
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += y[j] * (dy[j] - dot);
      }
    };
  }
  return result;
}

}  // namespace detail

// Softmax along axis 0 (columns) or the last axis (rows) of a matrix.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a, int axis = -1) {
  if (axis == -1 || axis == static_cast<int>(a.shape().size()) - 1) {
    return detail::softmax_last(a);
  }
  if (axis == 0 && a.shape().size() == 2) {
    return transpose(detail::softmax_last(transpose(a)));
  }
  fail("softmax: unsupported axis ", axis, " for shape ", shape_string(a.shape()));
}

// Normalises each row to zero mean / unit variance, then applies gamma, beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, double eps = 1e-12) {
  const std::size_t r = x.rows(), c = x.cols();
  if (gamma.size() != c || beta.size() != c) {
    fail("layer_norm: gamma/beta ", shape_string(gamma.shape()), "/",
         shape_string(beta.shape()), " do not match ", shape_string(x.shape()));
  }
  std::vector<T> xhat(x.size()), out(x.size()), rstd(r);
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = x.values().data() + i * c;
    double mean = 0, var = 0;
    for (std::size_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<double>(c);
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(c);
    double rs = 1.0 / std::sqrt(var + eps);
    rstd[i] = static_cast<T>(rs);
    for (std::size_t j = 0; j < c; ++j) {
      T h = static_cast<T>((row[j] - mean) * rs);
      xhat[i * c + j] = h;
      out[i * c + j] = h * gamma[j] + beta[j];
    }
  }
  auto nx = x.node_ptr(), ng = gamma.node_ptr(), nb = beta.node_ptr();
  return detail::make_op<T>(
      "layer_norm", x.shape(), std::move(out), {nx, ng, nb},
      [nx, ng, nb, r, c, xhat = std::move(xhat), rstd = std::move(rstd)](const Node<T>& o) {
        if (ng->requires_grad) {
          auto& g = ng->ensure_grad();
          for (std::size_t i = 0; i < o.grad.size(); ++i) g[i % c] += o.grad[i] * xhat[i];
        }
        if (nb->requires_grad) {
          auto& g = nb->ensure_grad();
          for (std::size_t i = 0; i < o.grad.size(); ++i) g[i % c] += o.grad[i];
        }
        if (nx->requires_grad) {
          auto& g = nx->ensure_grad();
          std::vector<T> dxhat(c);
          for (std::size_t i = 0; i < r; ++i) {
            T mean_d{0}, mean_dx{0};
            for (std::size_t j = 0; j < c; ++j) {
              dxhat[j] = o.grad[i * c + j] * ng->value[j];
              mean_d += dxhat[j];
              mean_dx += dxhat[j] * xhat[i * c + j];
            }
            mean_d /= static_cast<T>(c);
            mean_dx /= static_cast<T>(c);
            for (std::size_t j = 0; j < c; ++j) {
              g[i * c + j] += rstd[i] * (dxhat[j] - mean_d - xhat[i * c + j] * mean_dx);
            }
          }
        }
      });
}

// ------------------------------------------------------------------- indexing

// Rows of table[V,H] selected by ids -> [ids.size(), H].
template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const int> ids) {
  const std::size_t v = table.rows(), h = table.cols();
  std::vector<T> out(ids.size() * h);
  std::vector<int> idx(ids.begin(), ids.end());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= v) {
      fail("embedding_lookup: id ", idx[i], " out of range for table ",
           shape_string(table.shape()));
    }
    std::copy_n(table.values().data() + idx[i] * h, h, out.data() + i * h);
  }
  auto nt = table.node_ptr();
  const std::size_t n = idx.size();
  return detail::make_op<T>("embedding_lookup", {n, h}, std::move(out), {nt},
                            [nt, h, idx = std::move(idx)](const Node<T>& o) {
                              auto& g = nt->ensure_grad();
                              for (std::size_t i = 0; i < idx.size(); ++i) {
                                T* dst = g.data() + idx[i] * h;
                                const T* src = o.grad.data() + i * h;
                                for (std::size_t j = 0; j < h; ++j) dst[j] += src[j];
                              }
                            });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, std::span<const int> rows) {
  return embedding_lookup(a, rows);
}

// out[i] = a[rows[i], cols[i]]
template <typename T>
Tensor<T> gather_elements(const Tensor<T>& a, std::span<const int> rows,
                          std::span<const int> cols) {
  if (rows.size() != cols.size()) fail("gather_elements: index lists differ in length");
  const std::size_t c = a.cols();
  std::vector<std::size_t> flat(rows.size());
  std::vector<T> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || cols[i] < 0 || static_cast<std::size_t>(rows[i]) >= a.rows() ||
        static_cast<std::size_t>(cols[i]) >= c) {
      fail("gather_elements: index (", rows[i], ",", cols[i], ") out of range for ",
           shape_string(a.shape()));
    }
    flat[i] = static_cast<std::size_t>(rows[i]) * c + static_cast<std::size_t>(cols[i]);
    out[i] = a[flat[i]];
  }
  auto na = a.node_ptr();
  const std::size_t n = flat.size();
  return detail::make_op<T>("gather_elements", {n}, std::move(out), {na},
                            [na, flat = std::move(flat)](const Node<T>& o) {
                              auto& g = na->ensure_grad();
                              for (std::size_t i = 0; i < flat.size(); ++i) g[flat[i]] += o.grad[i];
                            });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) fail("concat_cols: no inputs");
  const std::size_t r = parts[0].rows();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  std::vector<std::shared_ptr<Node<T>>> nodes;
  for (const auto& p : parts) {
    if (p.rows() != r) {
      fail("concat_cols: row mismatch ", shape_string(parts[0].shape()), " vs ",
           shape_string(p.shape()));
    }
    widths.push_back(p.cols());
    nodes.push_back(p.node_ptr());
    total += p.cols();
  }
  std::vector<T> out(r * total);
  for (std::size_t i = 0; i < r; ++i) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      std::copy_n(parts[k].values().data() + i * widths[k], widths[k],
                  out.data() + i * total + off);
      off += widths[k];
    }
  }
  return detail::make_op<T>("concat_cols", {r, total}, std::move(out), nodes,
                            [nodes, widths, r, total](const Node<T>& o) {
                              std::size_t off = 0;
                              for (std::size_t k = 0; k < nodes.size(); ++k) {
                                if (nodes[k]->requires_grad) {
                                  auto& g = nodes[k]->ensure_grad();
                                  for (std::size_t i = 0; i < r; ++i)
                                    for (std::size_t j = 0; j < widths[k]; ++j)
                                      g[i * widths[k] + j] += o.grad[i * total + off + j];
                                }
                                off += widths[k];
                              }
                            });
}

// Reinterprets the value buffer with a new shape of equal size.
template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    fail("reshape: cannot view ", shape_string(a.shape()), " as ", shape_string(shape));
  }
  std::vector<T> out(a.values().begin(), a.values().end());
  auto na = a.node_ptr();
  return detail::make_op<T>("reshape", std::move(shape), std::move(out), {na},
                            [na](const Node<T>& o) {
                              auto& g = na->ensure_grad();
                              for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                            });
}

// ------------------------------------------------------------------ reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total{0};
  for (T v : a.values()) total += v;
  auto na = a.node_ptr();
  return detail::make_op<T>("sum", {1}, {total}, {na}, [na](const Node<T>& o) {
    auto& g = na->ensure_grad();
    for (auto& x : g) x += o.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.size() == 0) fail("mean: empty tensor");
  return affine(sum(a), T{1} / static_cast<T>(a.size()));
}

// Per-row L2 normalisation; eps guards zero rows.
template <typename T>
Tensor<T> normalize_rows(const Tensor<T>& a, double eps = 1e-12) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<T> out(a.size()), inv(r);
  for (std::size_t i = 0; i < r; ++i) {
    double ss = 0;
    for (std::size_t j = 0; j < c; ++j) ss += double(a[i * c + j]) * a[i * c + j];
    inv[i] = static_cast<T>(1.0 / std::max(std::sqrt(ss), eps));
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a[i * c + j] * inv[i];
  }
  auto na = a.node_ptr();
  auto result = detail::make_op<T>("normalize_rows", a.shape(), std::move(out), {na}, nullptr);
  if (result.requires_grad()) {
    result.node().backward_fn = [na, r, c, inv = std::move(inv)](const Node<T>& o) {
      auto& g = na->ensure_grad();
      for (std::size_t i = 0; i < r; ++i) {
        const T* y = o.value.data() + i * c;
        const T* dy = o.grad.data() + i * c;
        T dot{0};
        for (std::size_t j = 0; j < c; ++j) dot += y[j] * dy[j];
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += inv[i] * (dy[j] - y[j] * dot);
      }
    };
  }
  return result;
}

// Row-wise cosine similarity of two same-shaped matrices -> [rows].
template <typename T>
Tensor<T> cosine_similarity(const Tensor<T>& u, const Tensor<T>& v) {
  detail::require_same_shape("cosine_similarity", u, v);
  auto prod = mul(normalize_rows(u), normalize_rows(v));
  const std::size_t r = prod.rows(), c = prod.cols();
  std::vector<T> out(r, T{0});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i] += prod[i * c + j];
  auto np = prod.node_ptr();
  return detail::make_op<T>("row_sum", {r}, std::move(out), {np}, [np, c](const Node<T>& o) {
    auto& g = np->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i / c];
  });
}

// Pairwise cosine matrix [m,n] between rows of u[m,k] and v[n,k].
template <typename T>
Tensor<T> cosine_matrix(const Tensor<T>& u, const Tensor<T>& v) {
  return matmul_nt(normalize_rows(u), normalize_rows(v));
}

// ---------------------------------------------------------------------- losses

// Mean cross-entropy of rows of logits[n,k] against class targets.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets) {
  const std::size_t n = logits.rows(), k = logits.cols();
  if (targets.size() != n) {
    fail("cross_entropy: ", targets.size(), " targets for logits ",
         shape_string(logits.shape()));
  }
  if (n == 0) fail("cross_entropy: empty batch");
  std::vector<T> probs(logits.size());
  std::vector<int> tgt(targets.begin(), targets.end());
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (tgt[i] < 0 || static_cast<std::size_t>(tgt[i]) >= k) {
      fail("cross_entropy: target ", tgt[i], " out of range for ", k, " classes");
    }
    const T* x = logits.values().data() + i * k;
    T* p = probs.data() + i * k;
    T mx = *std::max_element(x, x + k);
    double z = 0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(double(x[j] - mx));
    double logz = std::log(z) + mx;
    for (std::size_t j = 0; j < k; ++j) p[j] = static_cast<T>(std::exp(x[j] - logz));
    total += logz - x[tgt[i]];
  }
  auto nl = logits.node_ptr();
  return detail::make_op<T>(
      "cross_entropy", {1}, {static_cast<T>(total / double(n))}, {nl},
      [nl, n, k, probs = std::move(probs), tgt = std::move(tgt)](const Node<T>& o) {
        auto& g = nl->ensure_grad();
        const T scale = o.grad[0] / static_cast<T>(n);
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < k; ++j) {
            T d = probs[i * k + j] - (static_cast<int>(j) == tgt[i] ? T{1} : T{0});
            g[i * k + j] += scale * d;
          }
        }
      });
}

// Mean squared error between predictions (any shape, n elements) and targets.
template <typename T>
Tensor<T> mse(const Tensor<T>& pred, std::span<const T> targets) {
  const std::size_t n = pred.size();
  if (targets.size() != n) {
    fail("mse: ", targets.size(), " targets for predictions ", shape_string(pred.shape()));
  }
  if (n == 0) fail("mse: empty input");
  std::vector<T> diff(n);
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    diff[i] = pred[i] - targets[i];
    total += double(diff[i]) * diff[i];
  }
  auto np = pred.node_ptr();
  return detail::make_op<T>("mse", {1}, {static_cast<T>(total / double(n))}, {np},
                            [np, n, diff = std::move(diff)](const Node<T>& o) {
                              auto& g = np->ensure_grad();
                              const T scale = T{2} * o.grad[0] / static_cast<T>(n);
                              for (std::size_t i = 0; i < n; ++i) g[i] += scale * diff[i];
                            });
}

// ------------------------------------------------------------------- attention

struct AttentionShape {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::size_t heads = 1;
};

// Fused multi-head scaled dot-product attention over q, k, v of shape
// [batch*seq, hidden]. key_mask[b*seq + j] false excludes key j of row b
// (its logit is -inf). If probs_out is given it receives the post-softmax,
// pre-dropout weights laid out [batch][heads][seq][seq].
template <typename T, typename Rng>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               std::span<const std::uint8_t> key_mask, AttentionShape s,
                               double dropout_p, Rng& rng, bool training,
                               std::vector<T>* probs_out = nullptr) {
  detail::require_same_shape("multi_head_attention", q, k);
  detail::require_same_shape("multi_head_attention", q, v);
  const std::size_t hidden = q.cols();
  if (q.rows() != s.batch * s.seq || key_mask.size() != s.batch * s.seq) {
    fail("multi_head_attention: expected ", s.batch * s.seq, " rows, got ", q.rows(),
         " rows and ", key_mask.size(), " mask entries");
  }
  if (s.heads == 0 || hidden % s.heads != 0) {
    fail("multi_head_attention: hidden ", hidden, " not divisible by heads ", s.heads);
  }
  const std::size_t dh = hidden / s.heads, L = s.seq;
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(double(dh)));
  const bool drop = training && dropout_p > 0.0;
  const T keep_scale = drop ? static_cast<T>(1.0 / (1.0 - dropout_p)) : T{1};
  std::bernoulli_distribution keep(drop ? 1.0 - dropout_p : 1.0);

  // probs: softmax weights; keep_mult: per-weight dropout multiplier.
  std::vector<T> probs(s.batch * s.heads * L * L, T{0});
  std::vector<T> keep_mult;
  if (drop) keep_mult.resize(probs.size());
  std::vector<T> out(q.size(), T{0});
  std::vector<std::uint8_t> mask(key_mask.begin(), key_mask.end());
  const T* qv = q.values().data();
  const T* kv = k.values().data();
  const T* vv = v.values().data();
  std::vector<T> scores(L * L), w(L * L);

  for (std::size_t b = 0; b < s.batch; ++b) {
    const std::uint8_t* mb = mask.data() + b * L;
    for (std::size_t h = 0; h < s.heads; ++h) {
      const std::size_t off = b * L * hidden + h * dh;
      T* P = probs.data() + (b * s.heads + h) * L * L;
      std::fill(scores.begin(), scores.end(), T{0});
      detail::gemm_strided(false, true, L, L, dh, qv + off, hidden, kv + off, hidden, scores.data(), L);
      for (std::size_t i = 0; i < L; ++i) {
        const T* si = scores.data() + i * L;
        T* pi = P + i * L;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < L; ++j)
          if (mb[j]) mx = std::max(mx, si[j] * inv_sqrt);
        T z{0};
        for (std::size_t j = 0; j < L; ++j)
          if (mb[j]) z += (pi[j] = std::exp(si[j] * inv_sqrt - mx));
        T* wi = w.data() + i * L;
        for (std::size_t j = 0; j < L; ++j) {
          wi[j] = T{0};
          if (!mb[j]) continue;
          pi[j] /= z;
          wi[j] = pi[j];
          if (drop) {
            T m = keep(rng) ? keep_scale : T{0};
            keep_mult[(b * s.heads + h) * L * L + i * L + j] = m;
            wi[j] *= m;
          }
        }
      }
      detail::gemm_strided(false, false, L, dh, L, w.data(), L, vv + off, hidden, out.data() + off, hidden);
    }
  }
  if (probs_out) *probs_out = probs;

  auto nq = q.node_ptr(), nk = k.node_ptr(), nv = v.node_ptr();
  return detail::make_op<T>(
      "multi_head_attention", q.shape(), std::move(out), {nq, nk, nv},
      [nq, nk, nv, s, dh, hidden, inv_sqrt, probs = std::move(probs), keep_mult = std::move(keep_mult),
       mask = std::move(mask)](const Node<T>& o) {
        const std::size_t L = s.seq;
        auto& gq = nq->ensure_grad();
        auto& gk = nk->ensure_grad();
        auto& gv = nv->ensure_grad();
        const bool drop = !keep_mult.empty();
        std::vector<T> w(L * L), dW(L * L);
        for (std::size_t b = 0; b < s.batch; ++b) {
          const std::uint8_t* mb = mask.data() + b * L;
          for (std::size_t h = 0; h < s.heads; ++h) {
            const std::size_t base = (b * s.heads + h) * L * L;
            const std::size_t off = b * L * hidden + h * dh;
            const T* P = probs.data() + base;
            for (std::size_t x = 0; x < L * L; ++x) w[x] = drop ? P[x] * keep_mult[base + x] : P[x];
            // dV += W^T dO, dW = dO V^T
            detail::gemm_strided(true, false, L, dh, L, w.data(), L, o.grad.data() + off, hidden,
                                 gv.data() + off, hidden);
            std::fill(dW.begin(), dW.end(), T{0});
            detail::gemm_strided(false, true, L, L, dh, o.grad.data() + off, hidden, nv->value.data() + off,
                                 hidden, dW.data(), L);
            // dW becomes dS in place.
            for (std::size_t i = 0; i < L; ++i) {
              T* di = dW.data() + i * L;
              const T* pi = P + i * L;
              T dot{0};
              for (std::size_t j = 0; j < L; ++j) {
                if (!mb[j]) {
                  di[j] = T{0};
                  continue;
                }
                if (drop) di[j] *= keep_mult[base + i * L + j];
                dot += di[j] * pi[j];
              }
              for (std::size_t j = 0; j < L; ++j)
                if (mb[j]) di[j] = pi[j] * (di[j] - dot) * inv_sqrt;
            }
            detail::gemm_strided(false, false, L, dh, L, dW.data(), L, nk->value.data() + off, hidden,
                                 gq.data() + off, hidden);
            detail::gemm_strided(true, false, L, dh, L, dW.data(), L, nq->value.data() + off, hidden,
                                 gk.data() + off, hidden);
          }
        }
      });
}

// Casts values (not graph) between precisions.
template <typename To, typename From>
Tensor<To> cast_values(const Tensor<From>& a, bool requires_grad) {
  std::vector<To> out(a.values().begin(), a.values().end());
  return Tensor<To>::from(a.shape(), std::move(out), requires_grad);
}

}  // namespace mtp
