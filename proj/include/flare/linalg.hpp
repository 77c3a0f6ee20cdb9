#pragma once

// Dense kernels shared by the tape ops, the mixer, and the spectral code.
// All matrices are row-major; the raw-pointer kernels take explicit dims so
// that callers can run them on head slices without extra wrapping.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <vector>

#include "flare/errors.hpp"
#include "flare/tensor.hpp"

namespace flare {

namespace kernel {

// C[m×n] (+)= A[m×k] · B[k×n]
template <class T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
          bool accumulate = false) {
  if (!accumulate) std::fill(c, c + m * n, T(0));
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = ai[p];
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// C[m×n] (+)= A[k×m]ᵀ · B[k×n]
template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate = false) {
  if (!accumulate) std::fill(c, c + m * n, T(0));
  for (std::size_t p = 0; p < k; ++p) {
    const T* ap = a + p * m;
    const T* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T api = ap[i];
      T* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

// out[cols×rows] = in[rows×cols]ᵀ
template <class T>
void transpose(const T* in, T* out, std::size_t rows, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = in[i * cols + j];
}

// C[m×n] (+)= A[m×k] · B[n×k]ᵀ, via an explicit transpose of B so the inner
// loop stays contiguous. `scratch` must hold k·n values.
template <class T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             T* scratch, bool accumulate = false) {
  transpose(b, scratch, n, k);
  gemm(a, scratch, c, m, k, n, accumulate);
}

// C[m×n] (+)= A[m×k] · B[n×k]ᵀ as m·n contiguous dot products of length k.
// Preferred over gemm_nt when n is small and k long.
template <class T>
void gemm_nt_dot(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
                 bool accumulate = false) {
  constexpr std::size_t L = 8;
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* bj = b + j * k;
      T acc[L] = {};
      std::size_t p = 0;
      for (; p + L <= k; p += L)
        for (std::size_t l = 0; l < L; ++l) acc[l] += ai[p + l] * bj[p + l];
      T s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
      for (; p < k; ++p) s += ai[p] * bj[p];
      c[i * n + j] = accumulate ? c[i * n + j] + s : s;
    }
  }
}

// out[cols×rows] += in[rows×cols]ᵀ
template <class T>
void add_transposed(const T* in, T* out, std::size_t rows, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] += in[i * cols + j];
}

// In-place numerically stable softmax of each row (per-row max shift).
template <class T>
void softmax_rows(T* s, std::size_t m, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* r = s + i * n;
    T mx = *std::max_element(r, r + n);
    T sum = 0;
    for (std::size_t j = 0; j < n; ++j) {
      r[j] = std::exp(r[j] - mx);
      sum += r[j];
    }
    const T inv = T(1) / sum;
    for (std::size_t j = 0; j < n; ++j) r[j] *= inv;
  }
}

// Softmax backward: ds = p ⊙ (dp − rowsum(dp ⊙ p)), written into dp.
template <class T>
void softmax_rows_backward(const T* p, T* dp, std::size_t m, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* pi = p + i * n;
    T* di = dp + i * n;
    T dot = 0;
    for (std::size_t j = 0; j < n; ++j) dot += pi[j] * di[j];
    for (std::size_t j = 0; j < n; ++j) di[j] = pi[j] * (di[j] - dot);
  }
}

// In-place softmax of each column of s [m×n], per-column max shift.
template <class T>
void softmax_cols(T* s, std::size_t m, std::size_t n) {
  std::vector<T> mx(s, s + n), sum(n, T(0));
  for (std::size_t i = 1; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) mx[j] = std::max(mx[j], s[i * n + j]);
  for (std::size_t i = 0; i < m; ++i) {
    T* r = s + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      r[j] = std::exp(r[j] - mx[j]);
      sum[j] += r[j];
    }
  }
  for (T& x : sum) x = T(1) / x;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) s[i * n + j] *= sum[j];
}

// Column-softmax backward, written into dp.
template <class T>
void softmax_cols_backward(const T* p, T* dp, std::size_t m, std::size_t n) {
  std::vector<T> dot(n, T(0));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) dot[j] += p[i * n + j] * dp[i * n + j];
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) dp[i * n + j] = p[i * n + j] * (dp[i * n + j] - dot[j]);
}

}  // namespace kernel

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a.shape(), 2, "matmul lhs");
  require_rank(b.shape(), 2, "matmul rhs");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions disagree: " + shape_str(a.shape()) +
                         " · " + shape_str(b.shape()));
  }
  Tensor<T> c({a.rows(), b.cols()});
  kernel::gemm(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.cols());
  return c;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_rank(a.shape(), 2, "transpose");
  Tensor<T> t({a.cols(), a.rows()});
  kernel::transpose(a.data(), t.data(), a.rows(), a.cols());
  return t;
}

template <class T>
Tensor<T> row_softmax(const Tensor<T>& s) {
  require_rank(s.shape(), 2, "row_softmax");
  for (T v : s.values()) {
    if (std::isnan(v)) throw InvalidValueError("row_softmax: NaN in input");
  }
  Tensor<T> out = s;
  kernel::softmax_rows(out.data(), s.rows(), s.cols());
  return out;
}

// Per-row layer normalization with population variance.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps) {
  require_rank(x.shape(), 2, "layer_norm");
  const std::size_t n = x.rows(), c = x.cols();
  if (c == 0) throw DimensionError("layer_norm: zero feature width");
  if (gamma.size() != c || beta.size() != c) {
    throw DimensionError("layer_norm: affine parameters do not match width " +
                         std::to_string(c));
  }
  Tensor<T> y({n, c});
  for (std::size_t i = 0; i < n; ++i) {
    auto r = x.row(i);
    T mean = 0;
    for (T v : r) mean += v;
    mean /= T(c);
    T var = 0;
    for (T v : r) var += (v - mean) * (v - mean);
    var /= T(c);
    const T rstd = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j)
      y(i, j) = gamma[j] * (r[j] - mean) * rstd + beta[j];
  }
  return y;
}

// Exact GELU, x·Φ(x).
template <class T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <class T>
T gelu_derivative(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (T& v : y.values()) v = gelu(v);
  return y;
}

}  // namespace flare
