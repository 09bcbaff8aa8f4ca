// Copyright (c) 2026 The caspr Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Dense tensors with tape-free reverse-mode differentiation. Every op result
// keeps shared references to its inputs and a closure that pushes its
// gradient back to them; backward() walks that DAG in reverse topological
// order. Graphs are confined to the thread that built them.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "caspr/error.hpp"

namespace caspr::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

[[noreturn]] inline void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw ShapeMismatch(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

namespace detail {
inline thread_local bool grad_enabled = true;
}

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first needed
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::span<T> grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
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
    std::vector<T> data(numel(shape), T(0));
    return from(std::move(shape), std::move(data), requires_grad);
  }
  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (data.size() != numel(shape))
      throw ShapeMismatch("data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }
  static Tensor scalar(T v, bool requires_grad = false) { return from({}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->data.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const T> data() const { return node_->data; }
  /// In-place access for leaves (optimizer updates, finite differences).
  std::span<T> mutable_data() { return node_->data; }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

  T item() const {
    if (size() != 1) throw ContractViolation("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  T at(std::initializer_list<std::size_t> idx) const {
    std::size_t off = 0, k = 0;
    for (auto i : idx) off = off * node_->shape.at(k++) + i;
    return node_->data.at(off);
  }

  /// New leaf holding a copy of the values, detached from any graph.
  Tensor detach() const { return from(shape(), node_->data, false); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::vector<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  if (grad_enabled) {
    bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>& t) { return t.requires_grad(); });
    if (any) {
      n->requires_grad = true;
      for (auto& in : inputs) n->parents.push_back(in.node());
      n->backward_fn = std::move(backward);
    }
  }
  return Tensor<T>(std::move(n));
}

template <typename T>
bool needs(const Node<T>& self, std::size_t i) {
  return self.parents[i]->requires_grad;
}

// out[M,N] (+)= a[M,K] * b[K,N]
template <typename T>
void gemm_nn(const T* a, const T* b, T* out, std::size_t M, std::size_t K, std::size_t N) {
  for (std::size_t i = 0; i < M; ++i) {
    T* o = out + i * N;
    const T* ai = a + i * K;
    for (std::size_t p = 0; p < K; ++p) {
      const T av = ai[p];
      if (av == T(0)) continue;
      const T* bp = b + p * N;
      for (std::size_t j = 0; j < N; ++j) o[j] += av * bp[j];
    }
  }
}

// out[M,K] += g[M,N] * b[K,N]^T
template <typename T>
void gemm_nt(const T* g, const T* b, T* out, std::size_t M, std::size_t K, std::size_t N) {
  for (std::size_t i = 0; i < M; ++i) {
    const T* gi = g + i * N;
    T* o = out + i * K;
    for (std::size_t p = 0; p < K; ++p) {
      const T* bp = b + p * N;
      T acc = T(0);
      for (std::size_t j = 0; j < N; ++j) acc += gi[j] * bp[j];
      o[p] += acc;
    }
  }
}

// out[K,N] += a[M,K]^T * g[M,N]
template <typename T>
void gemm_tn(const T* a, const T* g, T* out, std::size_t M, std::size_t K, std::size_t N) {
  for (std::size_t i = 0; i < M; ++i) {
    const T* ai = a + i * K;
    const T* gi = g + i * N;
    for (std::size_t p = 0; p < K; ++p) {
      const T av = ai[p];
      if (av == T(0)) continue;
      T* o = out + p * N;
      for (std::size_t j = 0; j < N; ++j) o[j] += av * gi[j];
    }
  }
}

// b's shape must equal a's shape or a trailing suffix of it.
inline std::size_t broadcast_inner(const char* op, const Shape& a, const Shape& b) {
  if (b.size() > a.size() || !std::equal(b.rbegin(), b.rend(), a.rbegin())) shape_error(op, a, b);
  return numel(b);
}

/// outer * axis * inner decomposition of a shape around `axis`.
struct AxisSplit {
  std::size_t outer, len, inner;
};
inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r{1, s.at(axis), 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// a[..., K] x b[K, N] -> [..., N]; leading dimensions of `a` are a batch.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 1 || b.rank() != 2 || a.shape().back() != b.dim(0)) shape_error("matmul", a.shape(), b.shape());
  const std::size_t K = b.dim(0), N = b.dim(1), M = a.size() / K;
  Shape out_shape = a.shape();
  out_shape.back() = N;
  std::vector<T> out(M * N, T(0));
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), M, K, N);
  return detail::make_result<T>(std::move(out_shape), std::move(out), {a, b}, [M, K, N](Node<T>& self) {
    auto& A = *self.parents[0];
    auto& B = *self.parents[1];
    if (A.requires_grad) detail::gemm_nt(self.grad.data(), B.data.data(), A.grad_buffer().data(), M, K, N);
    if (B.requires_grad) detail::gemm_tn(A.data.data(), self.grad.data(), B.grad_buffer().data(), M, K, N);
  });
}

/// Batched a[Bt, M, K] x b[Bt, K, N] -> [Bt, M, N].
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    shape_error("bmm", a.shape(), b.shape());
  const std::size_t Bt = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(2);
  std::vector<T> out(Bt * M * N, T(0));
  for (std::size_t n = 0; n < Bt; ++n)
    detail::gemm_nn(a.data().data() + n * M * K, b.data().data() + n * K * N, out.data() + n * M * N, M, K, N);
  return detail::make_result<T>({Bt, M, N}, std::move(out), {a, b}, [Bt, M, K, N](Node<T>& self) {
    auto& A = *self.parents[0];
    auto& B = *self.parents[1];
    for (std::size_t n = 0; n < Bt; ++n) {
      const T* g = self.grad.data() + n * M * N;
      if (A.requires_grad) detail::gemm_nt(g, B.data.data() + n * K * N, A.grad_buffer().data() + n * M * K, M, K, N);
      if (B.requires_grad) detail::gemm_tn(A.data.data() + n * M * K, g, B.grad_buffer().data() + n * K * N, M, K, N);
    }
  });
}

/// Swaps the last two dimensions.
template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() < 2) throw ShapeMismatch("transpose needs rank >= 2, got " + shape_str(a.shape()));
  Shape s = a.shape();
  const std::size_t R = s[s.size() - 2], C = s.back(), Bt = a.size() / (R * C);
  std::swap(s[s.size() - 2], s.back());
  std::vector<T> out(a.size());
  const T* in = a.data().data();
  for (std::size_t n = 0; n < Bt; ++n)
    for (std::size_t i = 0; i < R; ++i)
      for (std::size_t j = 0; j < C; ++j) out[n * R * C + j * R + i] = in[n * R * C + i * C + j];
  return detail::make_result<T>(std::move(s), std::move(out), {a}, [Bt, R, C](Node<T>& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t n = 0; n < Bt; ++n)
      for (std::size_t i = 0; i < R; ++i)
        for (std::size_t j = 0; j < C; ++j) g[n * R * C + i * C + j] += self.grad[n * R * C + j * R + i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise

/// a + b, where b has a's shape or a trailing suffix of it (bias broadcast).
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t inner = detail::broadcast_inner("add", a.shape(), b.shape());
  std::vector<T> out(a.data().begin(), a.data().end());
  const T* bd = b.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i % inner];
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [inner](Node<T>& self) {
    if (detail::needs(self, 0)) {
      auto g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (detail::needs(self, 1)) {
      auto g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % inner] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t inner = detail::broadcast_inner("sub", a.shape(), b.shape());
  std::vector<T> out(a.data().begin(), a.data().end());
  const T* bd = b.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bd[i % inner];
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [inner](Node<T>& self) {
    if (detail::needs(self, 0)) {
      auto g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (detail::needs(self, 1)) {
      auto g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % inner] -= self.grad[i];
    }
  });
}

/// Elementwise product with the same suffix broadcast as add().
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t inner = detail::broadcast_inner("mul", a.shape(), b.shape());
  std::vector<T> out(a.data().begin(), a.data().end());
  const T* bd = b.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bd[i % inner];
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [inner](Node<T>& self) {
    auto& A = *self.parents[0];
    auto& B = *self.parents[1];
    if (A.requires_grad) {
      auto g = A.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * B.data[i % inner];
    }
    if (B.requires_grad) {
      auto g = B.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % inner] += self.grad[i] * A.data[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= s;
  return detail::make_result<T>(a.shape(), std::move(out), {a}, [s](Node<T>& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v = v > T(0) ? v : T(0);
  return detail::make_result<T>(a.shape(), std::move(out), {a}, [](Node<T>& self) {
    auto g = self.parents[0]->grad_buffer();
    const auto& x = self.parents[0]->data;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > T(0)) g[i] += self.grad[i];
  });
}

/// Inverted dropout: zeroes with probability p and scales survivors by
/// 1/(1-p). Identity when !train or p == 0.
template <typename T, typename Rng>
Tensor<T> dropout(const Tensor<T>& a, double p, Rng& rng, bool train) {
  if (!train || p <= 0.0) return a;
  if (p >= 1.0) throw ConfigError("dropout probability must be < 1");
  std::bernoulli_distribution keep(1.0 - p);
  const T s = T(1.0 / (1.0 - p));
  std::vector<T> maskv(a.size());
  for (auto& m : maskv) m = keep(rng) ? s : T(0);
  std::vector<T> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= maskv[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a}, [maskv = std::move(maskv)](Node<T>& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * maskv[i];
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size()) shape_error("reshape", a.shape(), shape);
  return detail::make_result<T>(std::move(shape), std::vector<T>(a.data().begin(), a.data().end()), {a},
                                [](Node<T>& self) {
                                  auto g = self.parents[0]->grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractViolation("concat of zero tensors");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw ShapeMismatch("concat axis " + std::to_string(axis) + " out of range for " + shape_str(s0));
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != s0.size()) shape_error("concat", s0, p.shape());
    for (std::size_t d = 0; d < s0.size(); ++d)
      if (d != axis && p.dim(d) != s0[d]) shape_error("concat", s0, p.shape());
    out_shape[axis] += p.dim(axis);
  }
  auto sp = detail::split_at(out_shape, axis);
  std::vector<T> out(numel(out_shape));
  std::vector<std::size_t> widths;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(axis) * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(p.data().data() + o * w, w, out.data() + o * sp.len * sp.inner + off);
    widths.push_back(w);
    off += w;
  }
  return detail::make_result<T>(std::move(out_shape), std::move(out), parts, [sp, widths](Node<T>& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      const std::size_t w = widths[k];
      if (self.parents[k]->requires_grad) {
        auto g = self.parents[k]->grad_buffer();
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t i = 0; i < w; ++i) g[o * w + i] += self.grad[o * sp.len * sp.inner + off + i];
      }
      off += w;
    }
  });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t len) {
  if (axis >= a.rank() || start + len > a.dim(axis))
    throw ShapeMismatch("slice [" + std::to_string(start) + ", " + std::to_string(start + len) + ") on axis " +
                        std::to_string(axis) + " out of range for " + shape_str(a.shape()));
  auto sp = detail::split_at(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape[axis] = len;
  const std::size_t w = len * sp.inner, src_off = start * sp.inner, row = sp.len * sp.inner;
  std::vector<T> out(sp.outer * w);
  for (std::size_t o = 0; o < sp.outer; ++o) std::copy_n(a.data().data() + o * row + src_off, w, out.data() + o * w);
  return detail::make_result<T>(std::move(out_shape), std::move(out), {a}, [sp, w, src_off, row](Node<T>& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < w; ++i) g[o * row + src_off + i] += self.grad[o * w + i];
  });
}

/// [B, t, H*dk] -> [B*H, t, dk]
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
  if (x.rank() != 3 || heads == 0 || x.dim(2) % heads != 0)
    throw ShapeMismatch("split_heads: " + shape_str(x.shape()) + " not divisible into " + std::to_string(heads) +
                        " heads");
  const std::size_t B = x.dim(0), t = x.dim(1), D = x.dim(2), dk = D / heads;
  std::vector<T> out(x.size());
  const T* in = x.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t h = 0; h < heads; ++h)
        std::copy_n(in + (b * t + i) * D + h * dk, dk, out.data() + ((b * heads + h) * t + i) * dk);
  return detail::make_result<T>({B * heads, t, dk}, std::move(out), {x}, [B, t, D, dk, heads](Node<T>& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t k = 0; k < dk; ++k)
            g[(b * t + i) * D + h * dk + k] += self.grad[((b * heads + h) * t + i) * dk + k];
  });
}

/// [B*H, t, dk] -> [B, t, H*dk]; inverse of split_heads.
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x, std::size_t heads) {
  if (x.rank() != 3 || heads == 0 || x.dim(0) % heads != 0)
    throw ShapeMismatch("merge_heads: " + shape_str(x.shape()) + " with " + std::to_string(heads) + " heads");
  const std::size_t B = x.dim(0) / heads, t = x.dim(1), dk = x.dim(2), D = dk * heads;
  std::vector<T> out(x.size());
  const T* in = x.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < t; ++i)
        std::copy_n(in + ((b * heads + h) * t + i) * dk, dk, out.data() + (b * t + i) * D + h * dk);
  return detail::make_result<T>({B, t, D}, std::move(out), {x}, [B, t, D, dk, heads](Node<T>& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < t; ++i)
          for (std::size_t k = 0; k < dk; ++k)
            g[((b * heads + h) * t + i) * dk + k] += self.grad[(b * t + i) * D + h * dk + k];
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = T(0);
  for (T v : a.data()) s += v;
  return detail::make_result<T>({}, {s}, {a}, [](Node<T>& self) {
    auto g = self.parents[0]->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.size() == 0) throw ContractViolation("mean of empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

// ---------------------------------------------------------------------------
// Normalization

/// Softmax along `axis` with max subtraction. NaN input raises NumericError.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw ShapeMismatch("softmax axis out of range for " + shape_str(x.shape()));
  auto sp = detail::split_at(x.shape(), axis);
  std::vector<T> out(x.size());
  const T* in = x.data().data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t n = 0; n < sp.inner; ++n) {
      const std::size_t base = o * sp.len * sp.inner + n;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i < sp.len; ++i) {
        T v = in[base + i * sp.inner];
        if (std::isnan(v)) throw NumericError("softmax: NaN input");
        mx = std::max(mx, v);
      }
      T z = T(0);
      for (std::size_t i = 0; i < sp.len; ++i) z += (out[base + i * sp.inner] = std::exp(in[base + i * sp.inner] - mx));
      for (std::size_t i = 0; i < sp.len; ++i) out[base + i * sp.inner] /= z;
    }
  return detail::make_result<T>(x.shape(), std::move(out), {x}, [sp](Node<T>& self) {
    auto g = self.parents[0]->grad_buffer();
    const auto& y = self.data;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t n = 0; n < sp.inner; ++n) {
        const std::size_t base = o * sp.len * sp.inner + n;
        T dot = T(0);
        for (std::size_t i = 0; i < sp.len; ++i) dot += self.grad[base + i * sp.inner] * y[base + i * sp.inner];
        for (std::size_t i = 0; i < sp.len; ++i) {
          const std::size_t k = base + i * sp.inner;
          g[k] += y[k] * (self.grad[k] - dot);
        }
      }
  });
}

/// Layer normalization over the last axis with learned gamma/beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  const std::size_t D = x.shape().back();
  if (gamma.shape() != Shape{D} || beta.shape() != Shape{D}) shape_error("layer_norm", x.shape(), gamma.shape());
  const std::size_t rows = x.size() / D;
  std::vector<T> out(x.size()), xhat(x.size()), inv_std(rows);
  const T* in = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = in + r * D;
    T mu = T(0);
    for (std::size_t j = 0; j < D; ++j) mu += xr[j];
    mu /= static_cast<T>(D);
    T var = T(0);
    for (std::size_t j = 0; j < D; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(D);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < D; ++j) {
      xhat[r * D + j] = (xr[j] - mu) * is;
      out[r * D + j] = xhat[r * D + j] * gamma.data()[j] + beta.data()[j];
    }
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), {x, gamma, beta},
      [D, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        auto& X = *self.parents[0];
        auto& G = *self.parents[1];
        auto& Bn = *self.parents[2];
        if (G.requires_grad) {
          auto g = G.grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < D; ++j) g[j] += self.grad[r * D + j] * xhat[r * D + j];
        }
        if (Bn.requires_grad) {
          auto g = Bn.grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < D; ++j) g[j] += self.grad[r * D + j];
        }
        if (X.requires_grad) {
          auto g = X.grad_buffer();
          for (std::size_t r = 0; r < rows; ++r) {
            T sum_dy = T(0), sum_dy_xhat = T(0);
            for (std::size_t j = 0; j < D; ++j) {
              const T dy = self.grad[r * D + j] * G.data[j];
              sum_dy += dy;
              sum_dy_xhat += dy * xhat[r * D + j];
            }
            const T invD = T(1) / static_cast<T>(D);
            for (std::size_t j = 0; j < D; ++j) {
              const T dy = self.grad[r * D + j] * G.data[j];
              g[r * D + j] += inv_std[r] * (dy - invD * sum_dy - xhat[r * D + j] * invD * sum_dy_xhat);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Lookups and losses

/// Gathers rows of `table` [V, d]: result shape is `prefix` + [d].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<int>& codes, Shape prefix) {
  if (table.rank() != 2) throw ShapeMismatch("embedding table must be rank 2, got " + shape_str(table.shape()));
  if (numel(prefix) != codes.size()) throw ShapeMismatch("embedding: code count does not match " + shape_str(prefix));
  const std::size_t V = table.dim(0), d = table.dim(1);
  std::vector<T> out(codes.size() * d);
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (codes[i] < 0 || static_cast<std::size_t>(codes[i]) >= V)
      throw ShapeMismatch("embedding code " + std::to_string(codes[i]) + " outside table of " + std::to_string(V) +
                          " rows");
    std::copy_n(table.data().data() + codes[i] * d, d, out.data() + i * d);
  }
  prefix.push_back(d);
  return detail::make_result<T>(std::move(prefix), std::move(out), {table}, [codes, d](Node<T>& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < codes.size(); ++i)
      for (std::size_t k = 0; k < d; ++k) g[codes[i] * d + k] += self.grad[i * d + k];
  });
}

/// sum_n w_n * (-log softmax(logits_n)[target_n]) over logits [N, C].
template <typename T>
Tensor<T> weighted_cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets,
                                 const std::vector<T>& weights) {
  const std::size_t C = logits.shape().back(), N = logits.size() / C;
  if (targets.size() != N || weights.size() != N)
    throw ShapeMismatch("cross_entropy: " + std::to_string(N) + " rows but " + std::to_string(targets.size()) +
                        " targets / " + std::to_string(weights.size()) + " weights");
  std::vector<T> probs(logits.size());
  T loss = T(0);
  const T* in = logits.data().data();
  for (std::size_t n = 0; n < N; ++n) {
    if (targets[n] < 0 || static_cast<std::size_t>(targets[n]) >= C)
      throw ShapeMismatch("cross_entropy: target " + std::to_string(targets[n]) + " outside " + std::to_string(C) +
                          " classes");
    const T* z = in + n * C;
    T mx = *std::max_element(z, z + C);
    T se = T(0);
    for (std::size_t c = 0; c < C; ++c) se += (probs[n * C + c] = std::exp(z[c] - mx));
    for (std::size_t c = 0; c < C; ++c) probs[n * C + c] /= se;
    if (weights[n] != T(0)) loss += weights[n] * (std::log(se) + mx - z[targets[n]]);
  }
  return detail::make_result<T>({}, {loss}, {logits}, [C, N, targets, weights, probs = std::move(probs)](Node<T>& self) {
    auto g = self.parents[0]->grad_buffer();
    const T up = self.grad[0];
    for (std::size_t n = 0; n < N; ++n) {
      if (weights[n] == T(0)) continue;
      const T w = up * weights[n];
      for (std::size_t c = 0; c < C; ++c) g[n * C + c] += w * probs[n * C + c];
      g[n * C + targets[n]] -= w;
    }
  });
}

/// sum_n w_n * (pred_n - target_n)^2 over all elements of `pred`.
template <typename T>
Tensor<T> weighted_squared_error(const Tensor<T>& pred, const std::vector<T>& target, const std::vector<T>& weights) {
  if (target.size() != pred.size() || weights.size() != pred.size())
    throw ShapeMismatch("squared_error: prediction " + shape_str(pred.shape()) + " vs " +
                        std::to_string(target.size()) + " targets");
  T loss = T(0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const T d = pred.data()[i] - target[i];
    loss += weights[i] * d * d;
  }
  return detail::make_result<T>({}, {loss}, {pred}, [target, weights](Node<T>& self) {
    auto& P = *self.parents[0];
    auto g = P.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * T(2) * weights[i] * (P.data[i] - target[i]);
  });
}

/// sum_n w_n * BCE(sigmoid(z_n), y_n), computed stably from the logits.
template <typename T>
Tensor<T> weighted_bce_with_logits(const Tensor<T>& logits, const std::vector<T>& labels,
                                   const std::vector<T>& weights) {
  if (labels.size() != logits.size() || weights.size() != logits.size())
    throw ShapeMismatch("bce: logits " + shape_str(logits.shape()) + " vs " + std::to_string(labels.size()) +
                        " labels");
  T loss = T(0);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const T z = logits.data()[i];
    loss += weights[i] * (std::max(z, T(0)) - z * labels[i] + std::log1p(std::exp(-std::abs(z))));
  }
  return detail::make_result<T>({}, {loss}, {logits}, [labels, weights](Node<T>& self) {
    auto& Z = *self.parents[0];
    auto g = Z.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T p = T(1) / (T(1) + std::exp(-Z.data[i]));
      g[i] += self.grad[0] * weights[i] * (p - labels[i]);
    }
  });
}

// ---------------------------------------------------------------------------
// Reverse pass

/// Populates grad on every requires_grad node reachable from `loss`.
/// Interior gradients are recomputed on each call; leaf gradients
/// accumulate across calls until zero_grad().
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.size() != 1)
    throw ContractViolation("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (Node<T>* n : order)
    if (n->backward_fn) n->grad.assign(n->data.size(), T(0));
  Node<T>* root = loss.node().get();
  if (root->backward_fn)
    root->grad[0] = T(1);
  else
    root->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

}  // namespace caspr::ad
