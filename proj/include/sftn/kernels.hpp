// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <type_traits>

#include "sftn/common.hpp"

// Arithmetic inner loops. Every kernel has a scalar reference implementation
// (templated, used directly for double and for verification) and may have an
// AVX2 variant selected at runtime for float. Elementwise AVX2 kernels avoid
// FMA so they match the scalar reference bitwise; gemm and reductions use FMA
// and reordered accumulation, and are equivalence-tested at tolerance.

namespace sftn::kern {

enum class Backend { scalar, avx2 };

Backend active_backend();
void set_backend(Backend b);  // throws ConfigError if unsupported on this CPU
bool cpu_supports_avx2();
const char* backend_name();

struct FloatKernels {
  void (*add)(float*, const float*, const float*, int64_t);
  void (*sub)(float*, const float*, const float*, int64_t);
  void (*mul)(float*, const float*, const float*, int64_t);
  void (*scale)(float*, const float*, float, int64_t);
  void (*axpy)(float*, float, const float*, int64_t);
  void (*relu)(float*, const float*, int64_t);
  void (*relu_bwd_acc)(float*, const float*, const float*, int64_t);
  float (*sum)(const float*, int64_t);
  float (*dot)(const float*, const float*, int64_t);
  void (*gemm_nn)(int, int, int, const float*, int, const float*, int, float*, int, bool);
  void (*gemm_nt)(int, int, int, const float*, int, const float*, int, float*, int, bool);
  void (*gemm_tn)(int, int, int, const float*, int, const float*, int, float*, int, bool);
};

const FloatKernels& float_table();

// ---------------------------------------------------------------------------
// Scalar reference kernels.
// ---------------------------------------------------------------------------

namespace scalar {

template <class T>
inline void add(T* y, const T* a, const T* b, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = a[i] + b[i];
}

template <class T>
inline void sub(T* y, const T* a, const T* b, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = a[i] - b[i];
}

template <class T>
inline void mul(T* y, const T* a, const T* b, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = a[i] * b[i];
}

template <class T>
inline void scale(T* y, const T* x, T c, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = x[i] * c;
}

// y += a * x
template <class T>
inline void axpy(T* y, T a, const T* x, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] += a * x[i];
}

template <class T>
inline void relu(T* y, const T* x, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
}

// dx += dy where x > 0 (subgradient at 0 is 0)
template <class T>
inline void relu_bwd_acc(T* dx, const T* x, const T* dy, int64_t n) {
  for (int64_t i = 0; i < n; ++i) dx[i] += x[i] > T(0) ? dy[i] : T(0);
}

template <class T>
inline T sum(const T* x, int64_t n) {
  T s = T(0);
  for (int64_t i = 0; i < n; ++i) s += x[i];
  return s;
}

template <class T>
inline T dot(const T* a, const T* b, int64_t n) {
  T s = T(0);
  for (int64_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

// Row-major gemm. C (MxN) = A*B, accumulating into C when acc is set.
// nn: A[M,K], B[K,N]   nt: A[M,K], B[N,K]   tn: A[K,M], B[K,N]
template <class T>
inline void gemm_nn(int M, int N, int K, const T* A, int lda, const T* B, int ldb,
                    T* C, int ldc, bool acc) {
  for (int i = 0; i < M; ++i) {
    T* c = C + int64_t(i) * ldc;
    if (!acc)
      for (int j = 0; j < N; ++j) c[j] = T(0);
    for (int k = 0; k < K; ++k) {
      const T a = A[int64_t(i) * lda + k];
      const T* b = B + int64_t(k) * ldb;
      for (int j = 0; j < N; ++j) c[j] += a * b[j];
    }
  }
}

template <class T>
inline void gemm_nt(int M, int N, int K, const T* A, int lda, const T* B, int ldb,
                    T* C, int ldc, bool acc) {
  for (int i = 0; i < M; ++i) {
    const T* a = A + int64_t(i) * lda;
    T* c = C + int64_t(i) * ldc;
    for (int j = 0; j < N; ++j) {
      const T d = dot(a, B + int64_t(j) * ldb, K);
      c[j] = acc ? c[j] + d : d;
    }
  }
}

template <class T>
inline void gemm_tn(int M, int N, int K, const T* A, int lda, const T* B, int ldb,
                    T* C, int ldc, bool acc) {
  for (int i = 0; i < M; ++i) {
    T* c = C + int64_t(i) * ldc;
    if (!acc)
      for (int j = 0; j < N; ++j) c[j] = T(0);
    for (int k = 0; k < K; ++k) {
      const T a = A[int64_t(k) * lda + i];
      const T* b = B + int64_t(k) * ldb;
      for (int j = 0; j < N; ++j) c[j] += a * b[j];
    }
  }
}

}  // namespace scalar

// ---------------------------------------------------------------------------
// Dispatching entry points. Float goes through the runtime table, every other
// type uses the scalar reference directly.
// ---------------------------------------------------------------------------

template <class T>
inline void add(T* y, const T* a, const T* b, int64_t n) {
  if constexpr (std::is_same_v<T, float>) float_table().add(y, a, b, n);
  else scalar::add(y, a, b, n);
}
template <class T>
inline void sub(T* y, const T* a, const T* b, int64_t n) {
  if constexpr (std::is_same_v<T, float>) float_table().sub(y, a, b, n);
  else scalar::sub(y, a, b, n);
}
template <class T>
inline void mul(T* y, const T* a, const T* b, int64_t n) {
  if constexpr (std::is_same_v<T, float>) float_table().mul(y, a, b, n);
  else scalar::mul(y, a, b, n);
}
template <class T>
inline void scale(T* y, const T* x, T c, int64_t n) {
  if constexpr (std::is_same_v<T, float>) float_table().scale(y, x, c, n);
  else scalar::scale(y, x, c, n);
}
template <class T>
inline void axpy(T* y, T a, const T* x, int64_t n) {
  if constexpr (std::is_same_v<T, float>) float_table().axpy(y, a, x, n);
  else scalar::axpy(y, a, x, n);
}
template <class T>
inline void relu(T* y, const T* x, int64_t n) {
  if constexpr (std::is_same_v<T, float>) float_table().relu(y, x, n);
  else scalar::relu(y, x, n);
}
template <class T>
inline void relu_bwd_acc(T* dx, const T* x, const T* dy, int64_t n) {
  if constexpr (std::is_same_v<T, float>) float_table().relu_bwd_acc(dx, x, dy, n);
  else scalar::relu_bwd_acc(dx, x, dy, n);
}
template <class T>
inline T sum(const T* x, int64_t n) {
  if constexpr (std::is_same_v<T, float>) return float_table().sum(x, n);
  else return scalar::sum(x, n);
}
template <class T>
inline T dot(const T* a, const T* b, int64_t n) {
  if constexpr (std::is_same_v<T, float>) return float_table().dot(a, b, n);
  else return scalar::dot(a, b, n);
}
template <class T>
inline void gemm_nn(int M, int N, int K, const T* A, int lda, const T* B, int ldb,
                    T* C, int ldc, bool acc = false) {
  if constexpr (std::is_same_v<T, float>) float_table().gemm_nn(M, N, K, A, lda, B, ldb, C, ldc, acc);
  else scalar::gemm_nn(M, N, K, A, lda, B, ldb, C, ldc, acc);
}
template <class T>
inline void gemm_nt(int M, int N, int K, const T* A, int lda, const T* B, int ldb,
                    T* C, int ldc, bool acc = false) {
  if constexpr (std::is_same_v<T, float>) float_table().gemm_nt(M, N, K, A, lda, B, ldb, C, ldc, acc);
  else scalar::gemm_nt(M, N, K, A, lda, B, ldb, C, ldc, acc);
}
template <class T>
inline void gemm_tn(int M, int N, int K, const T* A, int lda, const T* B, int ldb,
                    T* C, int ldc, bool acc = false) {
  if constexpr (std::is_same_v<T, float>) float_table().gemm_tn(M, N, K, A, lda, B, ldb, C, ldc, acc);
  else scalar::gemm_tn(M, N, K, A, lda, B, ldb, C, ldc, acc);
}

// ---------------------------------------------------------------------------
// im2col / col2im. Pure data movement plus scatter-adds; shared by conv2d and
// conv_transpose2d in both directions, so they stay scalar.
//
// col is row-major [(C*kh*kw) x (Ho*Wo)], row r = (c*kh + ki)*kw + kj.
// ---------------------------------------------------------------------------

inline int conv_out_extent(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

template <class T>
inline void im2col(const T* img, int C, int H, int W, int kh, int kw, int stride,
                   int pad, T* col) {
  const int Ho = conv_out_extent(H, kh, stride, pad);
  const int Wo = conv_out_extent(W, kw, stride, pad);
  const int64_t cols = int64_t(Ho) * Wo;
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        T* dst = col + (int64_t(c) * kh * kw + ki * kw + kj) * cols;
        for (int oh = 0; oh < Ho; ++oh) {
          const int ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) {
            for (int ow = 0; ow < Wo; ++ow) dst[int64_t(oh) * Wo + ow] = T(0);
            continue;
          }
          const T* src = img + (int64_t(c) * H + ih) * W;
          for (int ow = 0; ow < Wo; ++ow) {
            const int iw = ow * stride - pad + kj;
            dst[int64_t(oh) * Wo + ow] = (iw < 0 || iw >= W) ? T(0) : src[iw];
          }
        }
      }
    }
  }
}

// img += col2im(col); caller zeroes img when overwrite semantics are wanted.
template <class T>
inline void col2im_acc(const T* col, int C, int H, int W, int kh, int kw, int stride,
                       int pad, T* img) {
  const int Ho = conv_out_extent(H, kh, stride, pad);
  const int Wo = conv_out_extent(W, kw, stride, pad);
  const int64_t cols = int64_t(Ho) * Wo;
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const T* src = col + (int64_t(c) * kh * kw + ki * kw + kj) * cols;
        for (int oh = 0; oh < Ho; ++oh) {
          const int ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) continue;
          T* dst = img + (int64_t(c) * H + ih) * W;
          for (int ow = 0; ow < Wo; ++ow) {
            const int iw = ow * stride - pad + kj;
            if (iw >= 0 && iw < W) dst[iw] += src[int64_t(oh) * Wo + ow];
          }
        }
      }
    }
  }
}

}  // namespace sftn::kern
