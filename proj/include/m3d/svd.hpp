#pragma once

// Truncated SVD by one-sided (Hestenes) Jacobi rotations.
//
// The iteration runs in double precision regardless of the tensor scalar type,
// on whichever side of the matrix has the smaller Gram matrix. Sweeps visit
// column pairs (p, q), p < q, in lexicographic order, so the result is a pure
// function of the input.

#include <algorithm>
#include <cmath>
#include <limits>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "m3d/error.hpp"
#include "m3d/tensor.hpp"

namespace m3d {

template <typename T>
struct SvdResult {
  Tensor<T> U;   // v×r, orthonormal columns
  Tensor<T> S;   // r, non-increasing, non-negative
  Tensor<T> Vt;  // r×d, orthonormal rows
  int sweeps = 0;

  Tensor<T> reconstruct() const {
    Tensor<T> us = U;
    const std::size_t r = S.size();
    for (std::size_t i = 0; i < us.rows(); ++i)
      for (std::size_t j = 0; j < r; ++j) us.at(i, j) *= S[j];
    return matmul(us, Vt);
  }
};

struct JacobiOptions {
  double tolerance = 1e-12;
  int max_sweeps = 100;
};

namespace detail {

// Column-major working copy; cols[j] is the j-th column.
struct JacobiColumns {
  std::vector<std::vector<double>> cols;
  std::vector<std::vector<double>> rotations;  // accumulated right factor, n columns of length n
};

inline int hestenes_sweeps(JacobiColumns& w, const JacobiOptions& opt) {
  const std::size_t n = w.cols.size();
  // Columns below this squared norm are rounding residue of a zero singular value.
  double total = 0;
  for (const auto& c : w.cols)
    for (double x : c) total += x * x;
  const double eps = std::numeric_limits<double>::epsilon();
  const double floor = eps * eps * total;
  auto clear_residue = [&] {
    for (auto& c : w.cols) {
      double sq = 0;
      for (double x : c) sq += x * x;
      if (sq <= floor) std::fill(c.begin(), c.end(), 0.0);
    }
  };
  for (int sweep = 1; sweep <= opt.max_sweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        auto& cp = w.cols[p];
        auto& cq = w.cols[q];
        double alpha = 0, beta = 0, gamma = 0;
        for (std::size_t i = 0; i < cp.size(); ++i) {
          alpha += cp[i] * cp[i];
          beta += cq[i] * cq[i];
          gamma += cp[i] * cq[i];
        }
        if (alpha <= floor || beta <= floor) continue;
        if (std::abs(gamma) <= opt.tolerance * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < cp.size(); ++i) {
          const double a = cp[i], b = cq[i];
          cp[i] = c * a - s * b;
          cq[i] = s * a + c * b;
        }
        auto& vp = w.rotations[p];
        auto& vq = w.rotations[q];
        for (std::size_t i = 0; i < n; ++i) {
          const double a = vp[i], b = vq[i];
          vp[i] = c * a - s * b;
          vq[i] = s * a + c * b;
        }
      }
    }
    if (!rotated) {
      clear_residue();
      return sweep;
    }
  }
  throw NumericalError("Jacobi SVD did not converge after " + std::to_string(opt.max_sweeps) +
                       " sweeps");
}

// Fills zero columns of an m×k column set (given as vectors) with unit vectors
// orthogonal to all others, by Gram-Schmidt over the standard basis.
inline void complete_orthonormal(std::vector<std::vector<double>>& cols,
                                 const std::vector<bool>& missing) {
  const std::size_t m = cols.empty() ? 0 : cols.front().size();
  std::size_t basis = 0;
  for (std::size_t j = 0; j < cols.size(); ++j) {
    if (!missing[j]) continue;
    for (; basis < m; ++basis) {
      std::vector<double> cand(m, 0.0);
      cand[basis] = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t o = 0; o < cols.size(); ++o) {
          if (o == j || (missing[o] && o > j)) continue;
          double d = 0;
          for (std::size_t i = 0; i < m; ++i) d += cand[i] * cols[o][i];
          for (std::size_t i = 0; i < m; ++i) cand[i] -= d * cols[o][i];
        }
      }
      double nrm = 0;
      for (double x : cand) nrm += x * x;
      nrm = std::sqrt(nrm);
      if (nrm > 1e-6) {
        for (auto& x : cand) x /= nrm;
        cols[j] = std::move(cand);
        ++basis;
        break;
      }
    }
  }
}

}  // namespace detail

/// Rank-r truncated SVD of a v×d matrix: U·diag(S)·Vt is its best rank-r
/// approximation. Sign convention: the largest-magnitude entry of each U
/// column (lowest index on ties) is non-negative; Vt rows flip to match.
template <typename T>
SvdResult<T> truncated_svd(const Tensor<T>& m, std::size_t r, JacobiOptions opt = {}) {
  require_matrix(m, "truncated_svd");
  const std::size_t rows = m.rows(), cols = m.cols();
  const std::size_t full = std::min(rows, cols);
  if (r < 1 || r > full)
    throw ParameterError("rank " + std::to_string(r) + " outside [1, " + std::to_string(full) +
                         "]");
  if (!m.all_finite()) throw NumericalError("truncated_svd input contains non-finite values");

  // Orthogonalize the columns of the tall orientation: A (tall) = W·Vᵀ with W = U·Σ.
  const bool transposed = rows < cols;
  const std::size_t tall = transposed ? cols : rows;
  const std::size_t narrow = full;
  detail::JacobiColumns w;
  w.cols.assign(narrow, std::vector<double>(tall));
  w.rotations.assign(narrow, std::vector<double>(narrow, 0.0));
  for (std::size_t j = 0; j < narrow; ++j) {
    w.rotations[j][j] = 1.0;
    for (std::size_t i = 0; i < tall; ++i)
      w.cols[j][i] = static_cast<double>(transposed ? m.at(j, i) : m.at(i, j));
  }
  const int sweeps = detail::hestenes_sweeps(w, opt);

  std::vector<double> sigma(narrow);
  for (std::size_t j = 0; j < narrow; ++j) {
    double s = 0;
    for (double x : w.cols[j]) s += x * x;
    sigma[j] = std::sqrt(s);
  }
  std::vector<std::size_t> order(narrow);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sigma[a] > sigma[b]; });

  const double smax = narrow ? sigma[order.front()] : 0.0;
  const double zero_cut = std::max(smax, 1.0) * 1e-300;
  std::vector<std::vector<double>> left(narrow), right(narrow);
  std::vector<double> s_sorted(narrow);
  std::vector<bool> missing(narrow, false);
  for (std::size_t k = 0; k < narrow; ++k) {
    const std::size_t j = order[k];
    s_sorted[k] = sigma[j];
    right[k] = w.rotations[j];
    left[k] = w.cols[j];
    if (sigma[j] <= zero_cut) {
      missing[k] = true;
      s_sorted[k] = 0.0;
      std::fill(left[k].begin(), left[k].end(), 0.0);
    } else {
      for (auto& x : left[k]) x /= sigma[j];
    }
  }
  detail::complete_orthonormal(left, missing);

  // tall side = left factor of the tall orientation. For a wide input,
  // Aᵀ = L·Σ·Rᵀ gives A = R·Σ·Lᵀ, so U comes from R and Vt from L.
  auto& u_cols = transposed ? right : left;
  auto& v_cols = transposed ? left : right;

  SvdResult<T> out;
  out.sweeps = sweeps;
  out.U = Tensor<T>({rows, r});
  out.S = Tensor<T>({r});
  out.Vt = Tensor<T>({r, cols});
  for (std::size_t k = 0; k < r; ++k) {
    const auto& u = u_cols[k];
    std::size_t arg = 0;
    for (std::size_t i = 1; i < u.size(); ++i)
      if (std::abs(u[i]) > std::abs(u[arg])) arg = i;
    const double sign = u[arg] < 0 ? -1.0 : 1.0;
    for (std::size_t i = 0; i < rows; ++i) out.U.at(i, k) = static_cast<T>(sign * u[i]);
    for (std::size_t i = 0; i < cols; ++i) out.Vt.at(k, i) = static_cast<T>(sign * v_cols[k][i]);
    out.S[k] = static_cast<T>(s_sorted[k]);
  }
  return out;
}

}  // namespace m3d
