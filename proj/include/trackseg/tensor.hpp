#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <utility>
#include <vector>

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#endif

namespace trackseg {

// Dense row-major matrix of doubles. The only tensor rank the library needs;
// pairwise (rank-3) quantities are stored as (rows*cols) x dim with explicit
// reshapes.
struct Tensor {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, 0.0) {}
  Tensor(int r, int c, std::vector<double> d) : rows(r), cols(c), data(std::move(d)) {
    if (data.size() != static_cast<std::size_t>(r) * c)
      throw std::invalid_argument("tensor: data size does not match shape");
  }

  static Tensor full(int r, int c, double v) {
    Tensor t(r, c);
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static Tensor row(std::vector<double> v) {
    const int n = static_cast<int>(v.size());
    return Tensor(1, n, std::move(v));
  }
  static Tensor col(std::vector<double> v) {
    const int n = static_cast<int>(v.size());
    return Tensor(n, 1, std::move(v));
  }

  double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
  double* row_ptr(int r) { return data.data() + static_cast<std::size_t>(r) * cols; }
  const double* row_ptr(int r) const { return data.data() + static_cast<std::size_t>(r) * cols; }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

// Fused dot product with a fixed accumulation order per build, so repeated
// evaluation is bit-reproducible. The wide path carries four vector
// accumulators; the scalar path mirrors it with four fma chains.
inline double dot(const double* a, const double* b, int n) {
#if defined(__AVX2__) && defined(__FMA__)
  __m256d s0 = _mm256_setzero_pd(), s1 = _mm256_setzero_pd();
  __m256d s2 = _mm256_setzero_pd(), s3 = _mm256_setzero_pd();
  int i = 0;
  for (; i + 16 <= n; i += 16) {
    s0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), s0);
    s1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), s1);
    s2 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 8), _mm256_loadu_pd(b + i + 8), s2);
    s3 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 12), _mm256_loadu_pd(b + i + 12), s3);
  }
  for (; i + 4 <= n; i += 4)
    s0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), s0);
  const __m256d s = _mm256_add_pd(_mm256_add_pd(s0, s1), _mm256_add_pd(s2, s3));
  double lanes[4];
  _mm256_storeu_pd(lanes, s);
  double out = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
  for (; i < n; ++i) out = std::fma(a[i], b[i], out);
  return out;
#else
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  int i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 = std::fma(a[i], b[i], s0);
    s1 = std::fma(a[i + 1], b[i + 1], s1);
    s2 = std::fma(a[i + 2], b[i + 2], s2);
    s3 = std::fma(a[i + 3], b[i + 3], s3);
  }
  for (; i < n; ++i) s0 = std::fma(a[i], b[i], s0);
  return (s0 + s1) + (s2 + s3);
#endif
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols != b.rows) throw std::invalid_argument("matmul: inner dimensions differ");
  Tensor c(a.rows, b.cols);
  for (int i = 0; i < a.rows; ++i) {
    double* crow = c.row_ptr(i);
    for (int k = 0; k < a.cols; ++k) {
      const double av = a.at(i, k);
      const double* brow = b.row_ptr(k);
      for (int j = 0; j < b.cols; ++j) crow[j] = std::fma(av, brow[j], crow[j]);
    }
  }
  return c;
}

// C = A * B^T; both operands are scanned along contiguous rows. B is walked
// in row blocks so each block stays cache-resident while every row of A
// visits it.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.cols != b.cols) throw std::invalid_argument("matmul_nt: inner dimensions differ");
  Tensor c(a.rows, b.rows);
  constexpr int block = 128;
  for (int j0 = 0; j0 < b.rows; j0 += block) {
    const int j1 = std::min(b.rows, j0 + block);
    for (int i = 0; i < a.rows; ++i) {
      const double* arow = a.row_ptr(i);
      double* crow = c.row_ptr(i);
      for (int j = j0; j < j1; ++j) crow[j] = dot(arow, b.row_ptr(j), a.cols);
    }
  }
  return c;
}

inline Tensor transpose(const Tensor& a) {
  Tensor t(a.cols, a.rows);
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < a.cols; ++j) t.at(j, i) = a.at(i, j);
  return t;
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

// Row-wise softmax with row-max subtraction. A zero-column input has no
// distribution to normalise and is rejected.
inline Tensor softmax_rows(const Tensor& x) {
  if (x.cols == 0) throw std::invalid_argument("softmax over empty set");
  Tensor y(x.rows, x.cols);
  for (int i = 0; i < x.rows; ++i) {
    const double* in = x.row_ptr(i);
    double* out = y.row_ptr(i);
    double m = in[0];
    for (int j = 1; j < x.cols; ++j) m = std::max(m, in[j]);
    double sum = 0.0;
    for (int j = 0; j < x.cols; ++j) {
      out[j] = std::exp(in[j] - m);
      sum += out[j];
    }
    for (int j = 0; j < x.cols; ++j) out[j] /= sum;
  }
  return y;
}

inline Tensor log_softmax_rows(const Tensor& x) {
  if (x.cols == 0) throw std::invalid_argument("softmax over empty set");
  Tensor y(x.rows, x.cols);
  for (int i = 0; i < x.rows; ++i) {
    const double* in = x.row_ptr(i);
    double* out = y.row_ptr(i);
    double m = in[0];
    for (int j = 1; j < x.cols; ++j) m = std::max(m, in[j]);
    double sum = 0.0;
    for (int j = 0; j < x.cols; ++j) sum += std::exp(in[j] - m);
    const double lse = m + std::log(sum);
    for (int j = 0; j < x.cols; ++j) out[j] = in[j] - lse;
  }
  return y;
}

}  // namespace trackseg
