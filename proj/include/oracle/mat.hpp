#pragma once
// Row-major matrix container and the numeric kernels behind the model and
// metrics. Every parallel kernel in oracle::kern has a serial twin in
// oracle::kern::serial computing bit-identical results; tests compare the
// two and tools/bench_kernels times them.
//
// Parallelism is over output rows, so each element is produced by the same
// arithmetic in the same order regardless of thread count. Kernels fall
// back to the serial path automatically inside enclosing parallel regions
// (batch elements, generation samples, metric pairs are parallelized one
// level up).

#include <omp.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <vector>

#include "oracle/common.hpp"

namespace oracle {

template <class T>
struct Mat {
  int rows = 0, cols = 0;
  std::vector<T> d;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), d(static_cast<size_t>(r) * c) {}

  void resize(int r, int c) {
    rows = r;
    cols = c;
    d.assign(static_cast<size_t>(r) * c, T(0));
  }
  void zero() { std::fill(d.begin(), d.end(), T(0)); }

  T* row(int i) { return d.data() + static_cast<size_t>(i) * cols; }
  const T* row(int i) const { return d.data() + static_cast<size_t>(i) * cols; }
  T& at(int i, int j) { return d[static_cast<size_t>(i) * cols + j]; }
  T at(int i, int j) const { return d[static_cast<size_t>(i) * cols + j]; }
  size_t size() const { return d.size(); }

  bool same_shape(const Mat& o) const {
    return rows == o.rows && cols == o.cols;
  }
};

namespace kern {

// Minimum row count before a kernel opens its own parallel region.
inline constexpr int kParRowThreshold = 64;

inline bool use_parallel(int rows) {
  return rows >= kParRowThreshold && !omp_in_parallel() &&
         omp_get_max_threads() > 1;
}

// exp on floats without libm: |rel err| < 3e-7 over the clamped range.
// Softmax feeds it shifted arguments (<= 0), well inside the range.
inline float fast_exp(float x) {
  x = std::min(88.0f, std::max(-87.0f, x));
  float z = x * 1.44269504088896341f;
  float n = std::floor(z + 0.5f);
  float r = x - n * 0.693359375f;
  r -= n * -2.12194440e-4f;
  float p = 1.9875691500e-4f;
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  p = p * r * r + r + 1.0f;
  return p * std::bit_cast<float>(
                 static_cast<uint32_t>(static_cast<int32_t>(n) + 127) << 23);
}
inline double fast_exp(double x) { return std::exp(x); }

inline float fast_tanh(float x) {
  if (x > 9.0f) return 1.0f;
  if (x < -9.0f) return -1.0f;
  float e = fast_exp(2.0f * x);
  return (e - 1.0f) / (e + 1.0f);
}
inline double fast_tanh(double x) { return std::tanh(x); }

namespace serial {

// C (m x n) = (or +=) A (m x k) * B (k x n), rows [i0, i1).
template <class T>
void gemm_rows(const T* A, const T* B, T* C, int i0, int i1, int k, int n,
               bool accumulate) {
  int i = i0;
  for (; i + 4 <= i1; i += 4) {
    T* c0 = C + static_cast<size_t>(i) * n;
    T* c1 = c0 + n;
    T* c2 = c1 + n;
    T* c3 = c2 + n;
    if (!accumulate) {
      std::fill(c0, c0 + n, T(0));
      std::fill(c1, c1 + n, T(0));
      std::fill(c2, c2 + n, T(0));
      std::fill(c3, c3 + n, T(0));
    }
    const T* a0 = A + static_cast<size_t>(i) * k;
    const T* a1 = a0 + k;
    const T* a2 = a1 + k;
    const T* a3 = a2 + k;
    for (int kk = 0; kk < k; ++kk) {
      const T v0 = a0[kk], v1 = a1[kk], v2 = a2[kk], v3 = a3[kk];
      const T* b = B + static_cast<size_t>(kk) * n;
#pragma omp simd
      for (int j = 0; j < n; ++j) {
        c0[j] += v0 * b[j];
        c1[j] += v1 * b[j];
        c2[j] += v2 * b[j];
        c3[j] += v3 * b[j];
      }
    }
  }
  for (; i < i1; ++i) {
    T* c = C + static_cast<size_t>(i) * n;
    if (!accumulate) std::fill(c, c + n, T(0));
    const T* a = A + static_cast<size_t>(i) * k;
    for (int kk = 0; kk < k; ++kk) {
      const T v = a[kk];
      const T* b = B + static_cast<size_t>(kk) * n;
#pragma omp simd
      for (int j = 0; j < n; ++j) c[j] += v * b[j];
    }
  }
}

template <class T>
void gemm(const T* A, const T* B, T* C, int m, int k, int n,
          bool accumulate = false) {
  gemm_rows(A, B, C, 0, m, k, n, accumulate);
}

template <class T>
void transpose(const T* A, T* AT, int m, int n) {
  for (int i = 0; i < m; ++i) {
    const T* a = A + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) AT[static_cast<size_t>(j) * m + i] = a[j];
  }
}

// Softmax over the first `valid[i]` entries of each row; the remainder is
// zeroed. Pass valid = nullptr for full rows.
template <class T>
void softmax_rows(T* X, int rows, int cols, const int* valid = nullptr) {
  for (int i = 0; i < rows; ++i) {
    T* x = X + static_cast<size_t>(i) * cols;
    int v = valid ? valid[i] : cols;
    T mx = x[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, x[j]);
    T sum = T(0);
    for (int j = 0; j < v; ++j) {
      x[j] = fast_exp(x[j] - mx);
      sum += x[j];
    }
    T inv = T(1) / sum;
    for (int j = 0; j < v; ++j) x[j] *= inv;
    for (int j = v; j < cols; ++j) x[j] = T(0);
  }
}

template <class T>
void layernorm_fwd(const T* X, const T* gamma, const T* beta, T* Y, T* mean,
                   T* rstd, int rows, int cols, T eps = T(1e-5)) {
  for (int i = 0; i < rows; ++i) {
    const T* x = X + static_cast<size_t>(i) * cols;
    T* y = Y + static_cast<size_t>(i) * cols;
    T m = T(0);
    for (int j = 0; j < cols; ++j) m += x[j];
    m /= cols;
    T var = T(0);
    for (int j = 0; j < cols; ++j) {
      T d = x[j] - m;
      var += d * d;
    }
    var /= cols;
    T rs = T(1) / std::sqrt(var + eps);
    mean[i] = m;
    rstd[i] = rs;
    for (int j = 0; j < cols; ++j) y[j] = gamma[j] * (x[j] - m) * rs + beta[j];
  }
}

// dX for rows [0, rows); dgamma/dbeta accumulate across rows.
template <class T>
void layernorm_bwd(const T* X, const T* gamma, const T* dY, const T* mean,
                   const T* rstd, T* dX, T* dgamma, T* dbeta, int rows,
                   int cols) {
  for (int i = 0; i < rows; ++i) {
    const T* x = X + static_cast<size_t>(i) * cols;
    const T* dy = dY + static_cast<size_t>(i) * cols;
    T* dx = dX + static_cast<size_t>(i) * cols;
    const T m = mean[i], rs = rstd[i];
    T sum_g = T(0), sum_gx = T(0);
    for (int j = 0; j < cols; ++j) {
      T xh = (x[j] - m) * rs;
      T g = gamma[j] * dy[j];
      sum_g += g;
      sum_gx += g * xh;
      dgamma[j] += dy[j] * xh;
      dbeta[j] += dy[j];
    }
    const T inv_n = T(1) / cols;
    for (int j = 0; j < cols; ++j) {
      T xh = (x[j] - m) * rs;
      T g = gamma[j] * dy[j];
      dx[j] = (g - inv_n * (sum_g + xh * sum_gx)) * rs;
    }
  }
}

// GELU, tanh approximation (the BERT variant of the Gaussian error unit).
template <class T>
void gelu_fwd(const T* X, T* Y, size_t n) {
  constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  for (size_t i = 0; i < n; ++i) {
    T x = X[i];
    T u = c * (x + T(0.044715) * x * x * x);
    Y[i] = T(0.5) * x * (T(1) + fast_tanh(u));
  }
}

template <class T>
void gelu_bwd(const T* X, const T* dY, T* dX, size_t n) {
  constexpr T c = T(0.7978845608028654);
  for (size_t i = 0; i < n; ++i) {
    T x = X[i];
    T u = c * (x + T(0.044715) * x * x * x);
    T t = fast_tanh(u);
    T du = c * (T(1) + T(3) * T(0.044715) * x * x);
    T grad = T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
    dX[i] = dY[i] * grad;
  }
}

}  // namespace serial

template <class T>
void gemm(const T* A, const T* B, T* C, int m, int k, int n,
          bool accumulate = false) {
  if (!use_parallel(m)) {
    serial::gemm(A, B, C, m, k, n, accumulate);
    return;
  }
#pragma omp parallel
  {
    int nt = omp_get_num_threads();
    int tid = omp_get_thread_num();
    int chunk = (m + nt - 1) / nt;
    chunk = (chunk + 3) & ~3;  // keep 4-row blocks intact
    int b = std::min(m, tid * chunk);
    int e = std::min(m, b + chunk);
    if (b < e) serial::gemm_rows(A, B, C, b, e, k, n, accumulate);
  }
}

template <class T>
void transpose(const T* A, T* AT, int m, int n) {
  serial::transpose(A, AT, m, n);  // bandwidth bound; not worth threads
}

template <class T>
void softmax_rows(T* X, int rows, int cols, const int* valid = nullptr) {
  if (!use_parallel(rows)) {
    serial::softmax_rows(X, rows, cols, valid);
    return;
  }
#pragma omp parallel for schedule(static)
  for (int i = 0; i < rows; ++i) {
    serial::softmax_rows(X + static_cast<size_t>(i) * cols, 1, cols,
                         valid ? valid + i : nullptr);
  }
}

template <class T>
void layernorm_fwd(const T* X, const T* gamma, const T* beta, T* Y, T* mean,
                   T* rstd, int rows, int cols, T eps = T(1e-5)) {
  if (!use_parallel(rows)) {
    serial::layernorm_fwd(X, gamma, beta, Y, mean, rstd, rows, cols, eps);
    return;
  }
#pragma omp parallel for schedule(static)
  for (int i = 0; i < rows; ++i) {
    serial::layernorm_fwd(X + static_cast<size_t>(i) * cols, gamma, beta,
                          Y + static_cast<size_t>(i) * cols, mean + i,
                          rstd + i, 1, cols, eps);
  }
}

template <class T>
void gelu_fwd(const T* X, T* Y, size_t n) {
  serial::gelu_fwd(X, Y, n);
}

template <class T>
void gelu_bwd(const T* X, const T* dY, T* dX, size_t n) {
  serial::gelu_bwd(X, dY, dX, n);
}

// y[j] += sum_i X[i][j]
template <class T>
void colsum_acc(const T* X, T* y, int rows, int cols) {
  for (int i = 0; i < rows; ++i) {
    const T* x = X + static_cast<size_t>(i) * cols;
#pragma omp simd
    for (int j = 0; j < cols; ++j) y[j] += x[j];
  }
}

template <class T>
void add_bias_rows(T* X, const T* bias, int rows, int cols) {
  for (int i = 0; i < rows; ++i) {
    T* x = X + static_cast<size_t>(i) * cols;
#pragma omp simd
    for (int j = 0; j < cols; ++j) x[j] += bias[j];
  }
}

template <class T>
void add_inplace(T* x, const T* y, size_t n) {
#pragma omp simd
  for (size_t i = 0; i < n; ++i) x[i] += y[i];
}

template <class T>
T dot(const T* a, const T* b, size_t n) {
  T s = T(0);
#pragma omp simd reduction(+ : s)
  for (size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

}  // namespace kern
}  // namespace oracle
