#pragma once

// Reverse-mode automatic differentiation over Tensor values.
//
// A GradTape owns the ordered record of every op whose inputs require grad.
// Ops are free functions taking the tape first; with recording disabled they
// compute values only, which is how the inference path reuses the same code.

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <algorithm>
#include <memory>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

#include "m3d/error.hpp"
#include "m3d/tensor.hpp"

namespace m3d {

template <typename T>
struct TapeNode {
  Tensor<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool is_leaf = false;
  std::function<void()> backward;

  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<TapeNode<T>> node) : node_(std::move(node)) {}

  const Tensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  TapeNode<T>* node() const { return node_.get(); }
  const std::shared_ptr<TapeNode<T>>& handle() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<TapeNode<T>> node_;
};

/// Gradients of one backward pass, keyed by leaf.
template <typename T>
class GradientMap {
 public:
  void set(const TapeNode<T>* leaf, Tensor<T> grad) { grads_[leaf] = std::move(grad); }

  /// Zero tensor for a leaf the loss does not depend on.
  Tensor<T> at(const Var<T>& leaf) const {
    auto it = grads_.find(leaf.node());
    if (it == grads_.end()) return Tensor<T>(leaf.shape());
    return it->second;
  }
  bool contains(const Var<T>& leaf) const { return grads_.count(leaf.node()) != 0; }
  std::size_t size() const { return grads_.size(); }

 private:
  std::unordered_map<const TapeNode<T>*, Tensor<T>> grads_;
};

template <typename T>
class GradTape {
 public:
  explicit GradTape(bool recording = true) : recording_(recording) {}
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Registers a leaf; it receives a gradient iff value.requires_grad().
  Var<T> leaf(Tensor<T> value) {
    auto node = std::make_shared<TapeNode<T>>();
    node->requires_grad = recording_ && value.requires_grad();
    node->is_leaf = true;
    node->value = std::move(value);
    if (node->requires_grad) nodes_.push_back(node);
    return Var<T>(node);
  }

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value.set_requires_grad(false))); }

  /// Records an op result. `make_backward(out)` is invoked only when some
  /// input requires grad, and returns the closure that propagates out->grad.
  template <typename MakeBackward>
  Var<T> record(Tensor<T> value, std::initializer_list<const Var<T>*> inputs,
                MakeBackward&& make_backward, const char* op) {
    ensure_finite(value, op);
    auto node = std::make_shared<TapeNode<T>>();
    node->value = std::move(value);
    bool needs = false;
    for (const Var<T>* in : inputs) needs = needs || in->requires_grad();
    if (recording_ && needs) {
      if (consumed_) throw UsageError("tape already consumed by backward()");
      node->requires_grad = true;
      node->backward = make_backward(node.get());
      nodes_.push_back(node);
    }
    return Var<T>(node);
  }

  /// Reverse pass from a scalar loss. Consumes the tape.
  GradientMap<T> backward(const Var<T>& loss) {
    if (consumed_) throw UsageError("tape already consumed by backward()");
    if (loss.value().size() != 1)
      throw UsageError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    GradientMap<T> out;
    if (loss.requires_grad()) {
      loss.node()->grad_buffer()[0] = T(1);
      for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        TapeNode<T>& n = **it;
        if (n.backward && !n.grad.empty()) n.backward();
      }
    }
    for (auto& n : nodes_) {
      if (!n->is_leaf) continue;
      Tensor<T> g(n->value.shape());
      if (!n->grad.empty()) g.storage() = std::move(n->grad);
      out.set(n.get(), std::move(g));
    }
    for (auto& n : nodes_) n->backward = nullptr;
    nodes_.clear();
    consumed_ = true;
    return out;
  }

 private:
  std::vector<std::shared_ptr<TapeNode<T>>> nodes_;
  bool recording_;
  bool consumed_ = false;
};

namespace detail {

template <typename T>
inline std::span<T> grad_of(const Var<T>& v) {
  return v.node()->grad_buffer();
}

template <typename T>
void check_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

}  // namespace detail

template <typename T>
Var<T> matmul(GradTape<T>& tape, const Var<T>& a, const Var<T>& b) {
  Tensor<T> value = matmul(a.value(), b.value());
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  return tape.record(std::move(value), {&a, &b}, [a, b, m, k, n](TapeNode<T>* out) {
    return [a, b, m, k, n, out] {
      std::span<const T> g = out->grad;
      if (a.requires_grad())
        kernels::matmul_nt<T>(g, b.value().data(), detail::grad_of(a), m, n, k, true);
      if (b.requires_grad())
        kernels::matmul_tn<T>(a.value().data(), g, detail::grad_of(b), m, k, n, true);
    };
  }, "matmul");
}

/// a[m×k] · b[n×k]ᵀ
template <typename T>
Var<T> matmul_transposed(GradTape<T>& tape, const Var<T>& a, const Var<T>& b) {
  require_matrix(a.value(), "matmul_transposed");
  require_matrix(b.value(), "matmul_transposed");
  if (a.cols() != b.cols())
    throw DimensionError("matmul_transposed inner extents differ: " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()) + "^T");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  Tensor<T> value({m, n});
  kernels::matmul_nt<T>(a.value().data(), b.value().data(), value.data(), m, k, n);
  return tape.record(std::move(value), {&a, &b}, [a, b, m, k, n](TapeNode<T>* out) {
    return [a, b, m, k, n, out] {
      std::span<const T> g = out->grad;
      if (a.requires_grad())
        kernels::matmul_nn<T>(g, b.value().data(), detail::grad_of(a), m, n, k, true);
      if (b.requires_grad())
        kernels::matmul_tn<T>(g, a.value().data(), detail::grad_of(b), m, n, k, true);
    };
  }, "matmul_transposed");
}

template <typename T>
Var<T> add(GradTape<T>& tape, const Var<T>& a, const Var<T>& b) {
  detail::check_same_shape(a, b, "add");
  return tape.record(a.value() + b.value(), {&a, &b}, [a, b](TapeNode<T>* out) {
    return [a, b, out] {
      for (const Var<T>* v : {&a, &b}) {
        if (!v->requires_grad()) continue;
        auto g = detail::grad_of(*v);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += out->grad[i];
      }
    };
  }, "add");
}

template <typename T>
Var<T> sub(GradTape<T>& tape, const Var<T>& a, const Var<T>& b) {
  detail::check_same_shape(a, b, "sub");
  return tape.record(a.value() - b.value(), {&a, &b}, [a, b](TapeNode<T>* out) {
    return [a, b, out] {
      if (a.requires_grad()) {
        auto g = detail::grad_of(a);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += out->grad[i];
      }
      if (b.requires_grad()) {
        auto g = detail::grad_of(b);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= out->grad[i];
      }
    };
  }, "sub");
}

/// Elementwise product.
template <typename T>
Var<T> mul(GradTape<T>& tape, const Var<T>& a, const Var<T>& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor<T> value(a.shape());
  for (std::size_t i = 0; i < value.size(); ++i) value[i] = a.value()[i] * b.value()[i];
  return tape.record(std::move(value), {&a, &b}, [a, b](TapeNode<T>* out) {
    return [a, b, out] {
      if (a.requires_grad()) {
        auto g = detail::grad_of(a);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += out->grad[i] * b.value()[i];
      }
      if (b.requires_grad()) {
        auto g = detail::grad_of(b);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += out->grad[i] * a.value()[i];
      }
    };
  }, "mul");
}

template <typename T>
Var<T> scale(GradTape<T>& tape, const Var<T>& a, T factor) {
  Tensor<T> value(a.shape());
  for (std::size_t i = 0; i < value.size(); ++i) value[i] = a.value()[i] * factor;
  return tape.record(std::move(value), {&a}, [a, factor](TapeNode<T>* out) {
    return [a, factor, out] {
      auto g = detail::grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out->grad[i] * factor;
    };
  }, "scale");
}

template <typename T>
Var<T> sum(GradTape<T>& tape, const Var<T>& a) {
  T s = T(0);
  for (T v : a.value().data()) s += v;
  return tape.record(Tensor<T>::scalar(s), {&a}, [a](TapeNode<T>* out) {
    return [a, out] {
      auto g = detail::grad_of(a);
      for (auto& v : g) v += out->grad[0];
    };
  }, "sum");
}

template <typename T>
Var<T> mean(GradTape<T>& tape, const Var<T>& a) {
  if (a.value().size() == 0) throw DimensionError("mean of an empty tensor");
  return scale(tape, sum(tape, a), T(1) / static_cast<T>(a.value().size()));
}

template <typename T>
Var<T> rms_norm(GradTape<T>& tape, const Var<T>& x, const Var<T>& gamma, T eps) {
  Tensor<T> value = rms_norm(x.value(), gamma.value(), eps);
  return tape.record(std::move(value), {&x, &gamma}, [x, gamma, eps](TapeNode<T>* out) {
    return [x, gamma, eps, out] {
      const std::size_t d = gamma.value().size();
      const auto& xv = x.value();
      const auto& gv = gamma.value();
      std::span<T> gx = x.requires_grad() ? detail::grad_of(x) : std::span<T>();
      std::span<T> gg = gamma.requires_grad() ? detail::grad_of(gamma) : std::span<T>();
      for (std::size_t off = 0; off < xv.size(); off += d) {
        T ms = T(0);
        for (std::size_t j = 0; j < d; ++j) ms += xv[off + j] * xv[off + j];
        const T inv = T(1) / std::sqrt(ms / static_cast<T>(d) + eps);
        T proj = T(0);
        for (std::size_t j = 0; j < d; ++j) {
          const T dy = out->grad[off + j];
          if (!gg.empty()) gg[j] += dy * xv[off + j] * inv;
          proj += gv[j] * dy * xv[off + j];
        }
        if (gx.empty()) continue;
        const T c = inv * inv * inv / static_cast<T>(d) * proj;
        for (std::size_t j = 0; j < d; ++j)
          gx[off + j] += inv * gv[j] * out->grad[off + j] - xv[off + j] * c;
      }
    };
  }, "rms_norm");
}

template <typename T>
Var<T> softmax_rows(GradTape<T>& tape, const Var<T>& x) {
  Tensor<T> value = softmax_rows(x.value());
  return tape.record(std::move(value), {&x}, [x](TapeNode<T>* out) {
    return [x, out] {
      const auto& y = out->value;
      auto gx = detail::grad_of(x);
      const std::size_t n = y.cols();
      for (std::size_t i = 0; i < y.rows(); ++i) {
        T s = T(0);
        for (std::size_t j = 0; j < n; ++j) s += out->grad[i * n + j] * y.at(i, j);
        for (std::size_t j = 0; j < n; ++j)
          gx[i * n + j] += y.at(i, j) * (out->grad[i * n + j] - s);
      }
    };
  }, "softmax_rows");
}

/// log Σ_j exp(x_ij) per row, as an [m×1] column.
template <typename T>
Var<T> logsumexp_rows(GradTape<T>& tape, const Var<T>& x) {
  require_matrix(x.value(), "logsumexp_rows");
  const std::size_t m = x.rows(), n = x.cols();
  Tensor<T> value({m, 1});
  for (std::size_t i = 0; i < m; ++i) {
    auto r = x.value().row(i);
    const T mx = *std::max_element(r.begin(), r.end());
    T s = T(0);
    for (T v : r) s += std::exp(v - mx);
    value[i] = mx + std::log(s);
  }
  return tape.record(std::move(value), {&x}, [x, n](TapeNode<T>* out) {
    return [x, n, out] {
      auto gx = detail::grad_of(x);
      for (std::size_t i = 0; i < out->value.size(); ++i) {
        const T lse = out->value[i];
        for (std::size_t j = 0; j < n; ++j)
          gx[i * n + j] += out->grad[i] * std::exp(x.value()[i * n + j] - lse);
      }
    };
  }, "logsumexp_rows");
}

template <typename T>
Var<T> gather_rows(GradTape<T>& tape, const Var<T>& table, std::vector<std::size_t> ids) {
  Tensor<T> value = gather_rows(table.value(), ids);
  return tape.record(std::move(value), {&table}, [table, ids = std::move(ids)](TapeNode<T>* out) {
    return [table, ids, out] {
      auto g = detail::grad_of(table);
      const std::size_t d = table.cols();
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) g[ids[i] * d + j] += out->grad[i * d + j];
    };
  }, "gather_rows");
}

template <typename T>
Var<T> slice(GradTape<T>& tape, const Var<T>& a, std::size_t row_begin, std::size_t row_end,
             std::size_t col_begin, std::size_t col_end) {
  Tensor<T> value = slice(a.value(), row_begin, row_end, col_begin, col_end);
  return tape.record(std::move(value), {&a}, [=](TapeNode<T>* out) {
    return [=] {
      auto g = detail::grad_of(a);
      const std::size_t w = col_end - col_begin, stride = a.cols();
      for (std::size_t i = row_begin; i < row_end; ++i)
        for (std::size_t j = 0; j < w; ++j)
          g[i * stride + col_begin + j] += out->grad[(i - row_begin) * w + j];
    };
  }, "slice");
}

template <typename T>
Var<T> slice_cols(GradTape<T>& tape, const Var<T>& a, std::size_t col_begin, std::size_t col_end) {
  return slice(tape, a, 0, a.rows(), col_begin, col_end);
}

template <typename T>
Var<T> slice_rows(GradTape<T>& tape, const Var<T>& a, std::size_t row_begin, std::size_t row_end) {
  return slice(tape, a, row_begin, row_end, 0, a.cols());
}

template <typename T>
Var<T> l2_normalize_rows(GradTape<T>& tape, const Var<T>& x) {
  Tensor<T> value = l2_normalize_rows(x.value());
  return tape.record(std::move(value), {&x}, [x](TapeNode<T>* out) {
    return [x, out] {
      auto gx = detail::grad_of(x);
      const std::size_t n = x.cols();
      for (std::size_t i = 0; i < x.rows(); ++i) {
        auto xr = x.value().row(i);
        const T norm = std::sqrt(dot<T>(xr, xr));
        T yd = T(0);
        for (std::size_t j = 0; j < n; ++j) yd += out->value.at(i, j) * out->grad[i * n + j];
        for (std::size_t j = 0; j < n; ++j)
          gx[i * n + j] += (out->grad[i * n + j] - out->value.at(i, j) * yd) / norm;
      }
    };
  }, "l2_normalize_rows");
}

template <typename T>
Var<T> silu(GradTape<T>& tape, const Var<T>& x) {
  Tensor<T> value(x.shape());
  for (std::size_t i = 0; i < value.size(); ++i) {
    const T v = x.value()[i];
    value[i] = v / (T(1) + std::exp(-v));
  }
  return tape.record(std::move(value), {&x}, [x](TapeNode<T>* out) {
    return [x, out] {
      auto gx = detail::grad_of(x);
      for (std::size_t i = 0; i < gx.size(); ++i) {
        const T v = x.value()[i];
        const T s = T(1) / (T(1) + std::exp(-v));
        gx[i] += out->grad[i] * (s + v * s * (T(1) - s));
      }
    };
  }, "silu");
}

/// Picks x[i, index[i][j]] into an [m×c] matrix.
template <typename T>
Var<T> take_per_row(GradTape<T>& tape, const Var<T>& x,
                    std::vector<std::vector<std::size_t>> index) {
  require_matrix(x.value(), "take_per_row");
  if (index.size() != x.rows()) throw DimensionError("take_per_row: one index list per row");
  const std::size_t c = index.empty() ? 0 : index.front().size();
  Tensor<T> value({index.size(), c});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i].size() != c) throw DimensionError("take_per_row: ragged index lists");
    for (std::size_t j = 0; j < c; ++j) {
      if (index[i][j] >= x.cols()) throw DimensionError("take_per_row: column out of range");
      value.at(i, j) = x.value().at(i, index[i][j]);
    }
  }
  return tape.record(std::move(value), {&x}, [x, index = std::move(index), c](TapeNode<T>* out) {
    return [x, index, c, out] {
      auto g = detail::grad_of(x);
      const std::size_t n = x.cols();
      for (std::size_t i = 0; i < index.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * n + index[i][j]] += out->grad[i * c + j];
    };
  }, "take_per_row");
}

namespace detail {

// Rotates consecutive pairs of each head by position-dependent angles.
// sign = -1 applies the inverse rotation (used by the backward pass).
template <typename T>
void apply_rope(std::span<const T> in, std::span<T> out, std::span<const std::size_t> positions,
                std::size_t d, std::size_t n_heads, T base, T sign, bool accumulate) {
  const std::size_t dh = d / n_heads;
  std::vector<T> freq(dh / 2);
  for (std::size_t i = 0; i < freq.size(); ++i)
    freq[i] = std::pow(base, -static_cast<T>(2 * i) / static_cast<T>(dh));
  for (std::size_t t = 0; t < positions.size(); ++t) {
    const T pos = static_cast<T>(positions[t]);
    for (std::size_t h = 0; h < n_heads; ++h) {
      for (std::size_t i = 0; i + 1 < dh; i += 2) {
        const T theta = pos * freq[i / 2];
        const T c = std::cos(theta), s = sign * std::sin(theta);
        const std::size_t o = t * d + h * dh + i;
        const T x0 = in[o], x1 = in[o + 1];
        const T y0 = x0 * c - x1 * s, y1 = x0 * s + x1 * c;
        if (accumulate) {
          out[o] += y0;
          out[o + 1] += y1;
        } else {
          out[o] = y0;
          out[o + 1] = y1;
        }
      }
      if (dh % 2 == 1) {
        const std::size_t o = t * d + h * dh + dh - 1;
        out[o] = accumulate ? out[o] + in[o] : in[o];
      }
    }
  }
}

}  // namespace detail

/// Rotary position encoding of an [N×d] matrix whose rows carry `positions`.
template <typename T>
Var<T> rope(GradTape<T>& tape, const Var<T>& x, std::vector<std::size_t> positions,
            std::size_t n_heads, T base = T(10000)) {
  require_matrix(x.value(), "rope");
  if (positions.size() != x.rows()) throw DimensionError("rope: one position per row");
  if (n_heads == 0 || x.cols() % n_heads != 0)
    throw DimensionError("rope: width not divisible by heads");
  Tensor<T> value(x.shape());
  detail::apply_rope<T>(x.value().data(), value.data(), positions, x.cols(), n_heads, base, T(1),
                        false);
  return tape.record(std::move(value), {&x},
                     [x, positions = std::move(positions), n_heads, base](TapeNode<T>* out) {
                       return [x, positions, n_heads, base, out] {
                         detail::apply_rope<T>(std::span<const T>(out->grad), detail::grad_of(x),
                                               positions, x.cols(), n_heads, base, T(-1), true);
                       };
                     },
                     "rope");
}

/// Packed causal multi-head attention. Rows of q, k, v are tokens of several
/// sequences laid out back to back; `lengths` gives each sequence's length.
/// Attention never crosses a sequence boundary and position i sees j ≤ i.
template <typename T>
Var<T> causal_attention(GradTape<T>& tape, const Var<T>& q, const Var<T>& k, const Var<T>& v,
                        std::vector<std::size_t> lengths, std::size_t n_heads) {
  detail::check_same_shape(q, k, "causal_attention");
  detail::check_same_shape(q, v, "causal_attention");
  const std::size_t d = q.cols();
  if (n_heads == 0 || d % n_heads != 0)
    throw DimensionError("causal_attention: width not divisible by heads");
  std::size_t total = 0;
  for (auto len : lengths) total += len;
  if (total != q.rows()) throw DimensionError("causal_attention: lengths do not cover rows");
  const std::size_t dh = d / n_heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));

  // probs holds each (sequence, head) lower-triangular softmax, row-major len×len.
  auto probs = std::make_shared<std::vector<T>>();
  std::size_t probs_size = 0;
  for (auto len : lengths) probs_size += n_heads * len * len;
  probs->assign(probs_size, T(0));

  Tensor<T> value(q.shape());
  const T* Q = q.value().data().data();
  const T* K = k.value().data().data();
  const T* V = v.value().data().data();
  T* O = value.data().data();
  std::size_t row0 = 0, p0 = 0;
  for (auto len : lengths) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      T* P = probs->data() + p0;
      for (std::size_t i = 0; i < len; ++i) {
        const T* qi = Q + (row0 + i) * d + h * dh;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          const T* kj = K + (row0 + j) * d + h * dh;
          T s = T(0);
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          s *= inv_sqrt;
          P[i * len + j] = s;
          mx = std::max(mx, s);
        }
        T total_exp = T(0);
        for (std::size_t j = 0; j <= i; ++j) total_exp += (P[i * len + j] = std::exp(P[i * len + j] - mx));
        T* oi = O + (row0 + i) * d + h * dh;
        for (std::size_t j = 0; j <= i; ++j) {
          const T p = (P[i * len + j] /= total_exp);
          const T* vj = V + (row0 + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p * vj[c];
        }
      }
      p0 += len * len;
    }
    row0 += len;
  }

  return tape.record(
      std::move(value), {&q, &k, &v},
      [q, k, v, lengths = std::move(lengths), n_heads, dh, d, inv_sqrt, probs](TapeNode<T>* out) {
        return [q, k, v, lengths, n_heads, dh, d, inv_sqrt, probs, out] {
          const T* Q = q.value().data().data();
          const T* K = k.value().data().data();
          const T* V = v.value().data().data();
          const T* dO = out->grad.data();
          T* dQ = q.requires_grad() ? detail::grad_of(q).data() : nullptr;
          T* dK = k.requires_grad() ? detail::grad_of(k).data() : nullptr;
          T* dV = v.requires_grad() ? detail::grad_of(v).data() : nullptr;
          std::vector<T> dS;
          std::size_t row0 = 0, p0 = 0;
          for (auto len : lengths) {
            dS.assign(len, T(0));
            for (std::size_t h = 0; h < n_heads; ++h) {
              const T* P = probs->data() + p0;
              for (std::size_t i = 0; i < len; ++i) {
                const T* doi = dO + (row0 + i) * d + h * dh;
                // dP_ij = dO_i · V_j ; dS_ij = P_ij (dP_ij − Σ_k P_ik dP_ik)
                T weighted = T(0);
                for (std::size_t j = 0; j <= i; ++j) {
                  const T* vj = V + (row0 + j) * d + h * dh;
                  T dp = T(0);
                  for (std::size_t c = 0; c < dh; ++c) dp += doi[c] * vj[c];
                  dS[j] = dp;
                  weighted += P[i * len + j] * dp;
                }
                for (std::size_t j = 0; j <= i; ++j) {
                  const T pij = P[i * len + j];
                  const T ds = pij * (dS[j] - weighted) * inv_sqrt;
                  if (dV) {
                    T* dvj = dV + (row0 + j) * d + h * dh;
                    for (std::size_t c = 0; c < dh; ++c) dvj[c] += pij * doi[c];
                  }
                  if (dQ) {
                    T* dqi = dQ + (row0 + i) * d + h * dh;
                    const T* kj = K + (row0 + j) * d + h * dh;
                    for (std::size_t c = 0; c < dh; ++c) dqi[c] += ds * kj[c];
                  }
                  if (dK) {
                    T* dkj = dK + (row0 + j) * d + h * dh;
                    const T* qi = Q + (row0 + i) * d + h * dh;
                    for (std::size_t c = 0; c < dh; ++c) dkj[c] += ds * qi[c];
                  }
                }
              }
              p0 += len * len;
            }
            row0 += len;
          }
        };
      },
      "causal_attention");
}

/// Central-difference gradient of a scalar function; test oracle for backward().
template <typename T, typename F>
Tensor<T> finite_diff_grad(F&& f, const Tensor<T>& x, T h) {
  if (!(h > T(0))) throw ParameterError("finite-difference step must be positive");
  Tensor<T> grad(x.shape());
  Tensor<T> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T orig = probe[i];
    probe[i] = orig + h;
    const T fp = static_cast<T>(f(probe));
    probe[i] = orig - h;
    const T fm = static_cast<T>(f(probe));
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericalError("finite-difference probe produced a non-finite value at index " +
                           std::to_string(i));
    grad[i] = (fp - fm) / (T(2) * h);
  }
  return grad;
}

}  // namespace m3d
