#pragma once

// Dense row-major tensors and the plain (tape-free) kernels shared by the
// autograd ops and the inference path.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "m3d/error.hpp"

namespace m3d {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size())
      throw DimensionError("shape " + shape_str(shape_) + " holds " +
                           std::to_string(shape_numel(shape_)) + " values, got " +
                           std::to_string(data_.size()));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<T> data) {
    return Tensor({rows, cols}, std::move(data));
  }
  static Tensor scalar(T value) { return Tensor({}, std::vector<T>{value}); }
  static Tensor from_rows(const std::vector<std::vector<T>>& rows) {
    std::size_t cols = rows.empty() ? 0 : rows.front().size();
    std::vector<T> flat;
    flat.reserve(rows.size() * cols);
    for (const auto& r : rows) {
      if (r.size() != cols) throw DimensionError("ragged rows");
      flat.insert(flat.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), cols}, std::move(flat));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t rows() const { return shape_.size() == 2 ? shape_[0] : throw_not_matrix(); }
  std::size_t cols() const { return shape_.size() == 2 ? shape_[1] : throw_not_matrix(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
  std::span<T> row(std::size_t r) { return std::span<T>(data_).subspan(r * cols(), cols()); }
  std::span<const T> row(std::size_t r) const {
    return std::span<const T>(data_).subspan(r * cols(), cols());
  }
  T item() const {
    if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  bool requires_grad() const noexcept { return requires_grad_; }
  Tensor& set_requires_grad(bool flag) noexcept {
    requires_grad_ = flag;
    return *this;
  }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  [[noreturn]] std::size_t throw_not_matrix() const {
    throw DimensionError("expected a matrix, got shape " + shape_str(shape_));
  }

  Shape shape_;
  std::vector<T> data_;
  bool requires_grad_ = false;
};

template <typename T>
void ensure_finite(const Tensor<T>& t, const char* op) {
  if (!t.all_finite()) throw NumericalError(std::string("non-finite value produced by ") + op);
}

template <typename T>
void require_matrix(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2)
    throw DimensionError(std::string(op) + " expects a matrix, got " + shape_str(t.shape()));
}

template <typename T>
Tensor<T> random_normal(Shape shape, T stddev, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
  for (auto& v : t.storage()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
Tensor<T> identity(std::size_t n) {
  Tensor<T> t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = T(1);
  return t;
}

namespace kernels {

// c[m×n] (+)= a[m×k] · b[k×n]
template <typename T>
void matmul_nn(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate = false) {
  if (!accumulate) std::fill(c.begin(), c.end(), T(0));
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c.data() + i * n;
    const T* arow = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m×n] (+)= a[m×k] · b[n×k]ᵀ
// b is transposed once so the inner loop runs over contiguous n; the
// accumulation order per output element is unchanged (p ascending).
template <typename T>
void matmul_nt(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate = false) {
  std::vector<T> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  std::vector<T> tmp;
  std::span<T> out = c;
  if (accumulate) {
    tmp.assign(m * n, T(0));
    out = tmp;
  } else {
    std::fill(c.begin(), c.end(), T(0));
  }
  for (std::size_t i = 0; i < m; ++i) {
    T* orow = out.data() + i * n;
    const T* arow = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = bt.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  if (accumulate)
    for (std::size_t i = 0; i < m * n; ++i) c[i] += tmp[i];
}

// c[k×n] (+)= a[m×k]ᵀ · b[m×n]
template <typename T>
void matmul_tn(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate = false) {
  if (!accumulate) std::fill(c.begin(), c.end(), T(0));
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a.data() + i * k;
    const T* brow = b.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      T* crow = c.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace kernels

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows())
    throw DimensionError("matmul inner extents differ: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  Tensor<T> c({a.rows(), b.cols()});
  kernels::matmul_nn<T>(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.cols());
  return c;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_matrix(a, "transpose");
  Tensor<T> t({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t.at(j, i) = a.at(i, j);
  return t;
}

/// Rows [0, rows) and columns [col_begin, col_end) of a matrix.
template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t row_begin, std::size_t row_end,
                std::size_t col_begin, std::size_t col_end) {
  require_matrix(a, "slice");
  if (row_begin > row_end || row_end > a.rows() || col_begin > col_end || col_end > a.cols())
    throw DimensionError("slice out of range for " + shape_str(a.shape()));
  Tensor<T> out({row_end - row_begin, col_end - col_begin});
  for (std::size_t i = row_begin; i < row_end; ++i)
    std::copy_n(a.data().data() + i * a.cols() + col_begin, col_end - col_begin,
                out.data().data() + (i - row_begin) * out.cols());
  return out;
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const std::size_t> ids) {
  require_matrix(table, "gather_rows");
  Tensor<T> out({ids.size(), table.cols()});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= table.rows())
      throw DataError("row id " + std::to_string(ids[i]) + " out of range " +
                      std::to_string(table.rows()));
    std::copy_n(table.row(ids[i]).data(), table.cols(), out.row(i).data());
  }
  return out;
}

/// Scales each trailing d-vector to unit RMS, then multiplies by gamma.
template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gamma, T eps) {
  if (x.rank() == 0 || gamma.rank() != 1 || x.shape().back() != gamma.size())
    throw DimensionError("rms_norm: trailing extent of " + shape_str(x.shape()) +
                         " does not match gamma " + shape_str(gamma.shape()));
  if (!(eps > T(0))) throw ParameterError("rms_norm eps must be positive");
  const std::size_t d = gamma.size();
  Tensor<T> out(x.shape());
  for (std::size_t off = 0; off < x.size(); off += d) {
    T ms = T(0);
    for (std::size_t j = 0; j < d; ++j) ms += x[off + j] * x[off + j];
    const T inv = T(1) / std::sqrt(ms / static_cast<T>(d) + eps);
    for (std::size_t j = 0; j < d; ++j) out[off + j] = x[off + j] * inv * gamma[j];
  }
  return out;
}

/// Row-wise softmax with the row max subtracted before exponentiation.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  require_matrix(x, "softmax_rows");
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto in = x.row(i);
    auto o = out.row(i);
    const T mx = *std::max_element(in.begin(), in.end());
    T total = T(0);
    for (std::size_t j = 0; j < in.size(); ++j) total += (o[j] = std::exp(in[j] - mx));
    for (auto& v : o) v /= total;
  }
  return out;
}

template <typename T>
T frobenius_norm(const Tensor<T>& a) {
  T s = T(0);
  for (T v : a.data()) s += v * v;
  return std::sqrt(s);
}

template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw DimensionError("subtract shape mismatch");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw DimensionError("add shape mismatch");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw DimensionError("max_abs_diff shape mismatch");
  T m = T(0);
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
  T s = T(0);
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// Copies rows to unit L2 norm; a zero row is a numerical error.
template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x) {
  require_matrix(x, "l2_normalize_rows");
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto in = x.row(i);
    const T n = std::sqrt(dot<T>(in, in));
    if (!(n > T(0))) throw NumericalError("zero vector cannot be normalized (row " +
                                          std::to_string(i) + ")");
    auto o = out.row(i);
    for (std::size_t j = 0; j < in.size(); ++j) o[j] = in[j] / n;
  }
  return out;
}

template <typename T>
T cosine(std::span<const T> a, std::span<const T> b) {
  const T na = std::sqrt(dot(a, a));
  const T nb = std::sqrt(dot(b, b));
  if (!(na > T(0)) || !(nb > T(0))) throw NumericalError("cosine of a zero-norm vector");
  return dot(a, b) / (na * nb);
}

}  // namespace m3d
