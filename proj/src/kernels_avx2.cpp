// SPDX-License-Identifier: Apache-2.0
#include "sftn/kernels.hpp"

// AVX2+FMA float kernels. This translation unit is compiled with -mavx2 -mfma;
// nothing here runs unless the dispatcher verified CPU support.
//
// Elementwise kernels use separate mul/add (no FMA) so they are bitwise equal
// to the scalar reference. gemm/sum/dot use FMA and multiple accumulators.

#if defined(__x86_64__) || defined(_M_X64)
#include <immintrin.h>

namespace sftn::kern {
namespace {

inline float hsum256(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  __m128 sh = _mm_movehl_ps(lo, lo);
  lo = _mm_add_ps(lo, sh);
  sh = _mm_shuffle_ps(lo, lo, 0x1);
  lo = _mm_add_ss(lo, sh);
  return _mm_cvtss_f32(lo);
}

void a_add(float* y, const float* a, const float* b, int64_t n) {
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) y[i] = a[i] + b[i];
}

void a_sub(float* y, const float* a, const float* b, int64_t n) {
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_sub_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) y[i] = a[i] - b[i];
}

void a_mul(float* y, const float* a, const float* b, int64_t n) {
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) y[i] = a[i] * b[i];
}

void a_scale(float* y, const float* x, float c, int64_t n) {
  const __m256 cv = _mm256_set1_ps(c);
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_mul_ps(_mm256_loadu_ps(x + i), cv));
  for (; i < n; ++i) y[i] = x[i] * c;
}

// mul+add, not fmadd: keeps bitwise parity with the scalar kernel.
void a_axpy(float* y, float a, const float* x, int64_t n) {
  const __m256 av = _mm256_set1_ps(a);
  int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 prod = _mm256_mul_ps(av, _mm256_loadu_ps(x + i));
    _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_loadu_ps(y + i), prod));
  }
  for (; i < n; ++i) y[i] += a * x[i];
}

void a_relu(float* y, const float* x, int64_t n) {
  const __m256 zero = _mm256_setzero_ps();
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_max_ps(_mm256_loadu_ps(x + i), zero));
  for (; i < n; ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void a_relu_bwd(float* dx, const float* x, const float* dy, int64_t n) {
  const __m256 zero = _mm256_setzero_ps();
  int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 mask = _mm256_cmp_ps(_mm256_loadu_ps(x + i), zero, _CMP_GT_OQ);
    __m256 g = _mm256_and_ps(_mm256_loadu_ps(dy + i), mask);
    _mm256_storeu_ps(dx + i, _mm256_add_ps(_mm256_loadu_ps(dx + i), g));
  }
  for (; i < n; ++i) dx[i] += x[i] > 0.0f ? dy[i] : 0.0f;
}

float a_sum(const float* x, int64_t n) {
  __m256 acc0 = _mm256_setzero_ps();
  __m256 acc1 = _mm256_setzero_ps();
  int64_t i = 0;
  for (; i + 16 <= n; i += 16) {
    acc0 = _mm256_add_ps(acc0, _mm256_loadu_ps(x + i));
    acc1 = _mm256_add_ps(acc1, _mm256_loadu_ps(x + i + 8));
  }
  for (; i + 8 <= n; i += 8) acc0 = _mm256_add_ps(acc0, _mm256_loadu_ps(x + i));
  float s = hsum256(_mm256_add_ps(acc0, acc1));
  for (; i < n; ++i) s += x[i];
  return s;
}

float a_dot(const float* a, const float* b, int64_t n) {
  __m256 acc0 = _mm256_setzero_ps();
  __m256 acc1 = _mm256_setzero_ps();
  int64_t i = 0;
  for (; i + 16 <= n; i += 16) {
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
    acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i + 8), _mm256_loadu_ps(b + i + 8), acc1);
  }
  for (; i + 8 <= n; i += 8)
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
  float s = hsum256(_mm256_add_ps(acc0, acc1));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

// 4x16 register-blocked inner kernel. a_idx maps (i, k) to the element of A
// used, which lets the same kernel serve gemm_nn and gemm_tn.
template <bool TransA>
inline void gemm_block16(int M, int N, int K, const float* A, int lda, const float* B,
                         int ldb, float* C, int ldc, bool acc) {
  auto a_at = [&](int i, int k) -> float {
    return TransA ? A[int64_t(k) * lda + i] : A[int64_t(i) * lda + k];
  };
  int j = 0;
  for (; j + 16 <= N; j += 16) {
    int i = 0;
    for (; i + 4 <= M; i += 4) {
      __m256 c00, c01, c10, c11, c20, c21, c30, c31;
      if (acc) {
        c00 = _mm256_loadu_ps(C + int64_t(i) * ldc + j);
        c01 = _mm256_loadu_ps(C + int64_t(i) * ldc + j + 8);
        c10 = _mm256_loadu_ps(C + int64_t(i + 1) * ldc + j);
        c11 = _mm256_loadu_ps(C + int64_t(i + 1) * ldc + j + 8);
        c20 = _mm256_loadu_ps(C + int64_t(i + 2) * ldc + j);
        c21 = _mm256_loadu_ps(C + int64_t(i + 2) * ldc + j + 8);
        c30 = _mm256_loadu_ps(C + int64_t(i + 3) * ldc + j);
        c31 = _mm256_loadu_ps(C + int64_t(i + 3) * ldc + j + 8);
      } else {
        c00 = c01 = c10 = c11 = c20 = c21 = c30 = c31 = _mm256_setzero_ps();
      }
      for (int k = 0; k < K; ++k) {
        const __m256 b0 = _mm256_loadu_ps(B + int64_t(k) * ldb + j);
        const __m256 b1 = _mm256_loadu_ps(B + int64_t(k) * ldb + j + 8);
        __m256 a0 = _mm256_set1_ps(a_at(i, k));
        __m256 a1 = _mm256_set1_ps(a_at(i + 1, k));
        c00 = _mm256_fmadd_ps(a0, b0, c00);
        c01 = _mm256_fmadd_ps(a0, b1, c01);
        c10 = _mm256_fmadd_ps(a1, b0, c10);
        c11 = _mm256_fmadd_ps(a1, b1, c11);
        a0 = _mm256_set1_ps(a_at(i + 2, k));
        a1 = _mm256_set1_ps(a_at(i + 3, k));
        c20 = _mm256_fmadd_ps(a0, b0, c20);
        c21 = _mm256_fmadd_ps(a0, b1, c21);
        c30 = _mm256_fmadd_ps(a1, b0, c30);
        c31 = _mm256_fmadd_ps(a1, b1, c31);
      }
      _mm256_storeu_ps(C + int64_t(i) * ldc + j, c00);
      _mm256_storeu_ps(C + int64_t(i) * ldc + j + 8, c01);
      _mm256_storeu_ps(C + int64_t(i + 1) * ldc + j, c10);
      _mm256_storeu_ps(C + int64_t(i + 1) * ldc + j + 8, c11);
      _mm256_storeu_ps(C + int64_t(i + 2) * ldc + j, c20);
      _mm256_storeu_ps(C + int64_t(i + 2) * ldc + j + 8, c21);
      _mm256_storeu_ps(C + int64_t(i + 3) * ldc + j, c30);
      _mm256_storeu_ps(C + int64_t(i + 3) * ldc + j + 8, c31);
    }
    for (; i < M; ++i) {
      __m256 c0, c1;
      if (acc) {
        c0 = _mm256_loadu_ps(C + int64_t(i) * ldc + j);
        c1 = _mm256_loadu_ps(C + int64_t(i) * ldc + j + 8);
      } else {
        c0 = c1 = _mm256_setzero_ps();
      }
      for (int k = 0; k < K; ++k) {
        const __m256 av = _mm256_set1_ps(a_at(i, k));
        c0 = _mm256_fmadd_ps(av, _mm256_loadu_ps(B + int64_t(k) * ldb + j), c0);
        c1 = _mm256_fmadd_ps(av, _mm256_loadu_ps(B + int64_t(k) * ldb + j + 8), c1);
      }
      _mm256_storeu_ps(C + int64_t(i) * ldc + j, c0);
      _mm256_storeu_ps(C + int64_t(i) * ldc + j + 8, c1);
    }
  }
  if (j < N) {  // column tail, scalar
    for (int i = 0; i < M; ++i) {
      float* c = C + int64_t(i) * ldc;
      if (!acc)
        for (int jj = j; jj < N; ++jj) c[jj] = 0.0f;
      for (int k = 0; k < K; ++k) {
        const float a = a_at(i, k);
        const float* b = B + int64_t(k) * ldb;
        for (int jj = j; jj < N; ++jj) c[jj] += a * b[jj];
      }
    }
  }
}

void a_gemm_nn(int M, int N, int K, const float* A, int lda, const float* B, int ldb,
               float* C, int ldc, bool acc) {
  gemm_block16<false>(M, N, K, A, lda, B, ldb, C, ldc, acc);
}

void a_gemm_tn(int M, int N, int K, const float* A, int lda, const float* B, int ldb,
               float* C, int ldc, bool acc) {
  gemm_block16<true>(M, N, K, A, lda, B, ldb, C, ldc, acc);
}

void a_gemm_nt(int M, int N, int K, const float* A, int lda, const float* B, int ldb,
               float* C, int ldc, bool acc) {
  for (int i = 0; i < M; ++i) {
    const float* a = A + int64_t(i) * lda;
    float* c = C + int64_t(i) * ldc;
    for (int j = 0; j < N; ++j) {
      const float d = a_dot(a, B + int64_t(j) * ldb, K);
      c[j] = acc ? c[j] + d : d;
    }
  }
}

}  // namespace

const FloatKernels* avx2_float_table_or_null() {
  static const FloatKernels t = {
      a_add, a_sub, a_mul, a_scale, a_axpy, a_relu, a_relu_bwd,
      a_sum, a_dot, a_gemm_nn, a_gemm_nt, a_gemm_tn,
  };
  return &t;
}

}  // namespace sftn::kern

#else

namespace sftn::kern {
const FloatKernels* avx2_float_table_or_null() { return nullptr; }
}  // namespace sftn::kern

#endif
