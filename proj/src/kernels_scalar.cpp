// SPDX-License-Identifier: Apache-2.0
#include "sftn/kernels.hpp"

namespace sftn::kern {

// Float entries for the scalar reference backend. These are thin wrappers so
// the dispatch table has uniform signatures.

namespace {

void s_add(float* y, const float* a, const float* b, int64_t n) { scalar::add(y, a, b, n); }
void s_sub(float* y, const float* a, const float* b, int64_t n) { scalar::sub(y, a, b, n); }
void s_mul(float* y, const float* a, const float* b, int64_t n) { scalar::mul(y, a, b, n); }
void s_scale(float* y, const float* x, float c, int64_t n) { scalar::scale(y, x, c, n); }
void s_axpy(float* y, float a, const float* x, int64_t n) { scalar::axpy(y, a, x, n); }
void s_relu(float* y, const float* x, int64_t n) { scalar::relu(y, x, n); }
void s_relu_bwd(float* dx, const float* x, const float* dy, int64_t n) {
  scalar::relu_bwd_acc(dx, x, dy, n);
}
float s_sum(const float* x, int64_t n) { return scalar::sum(x, n); }
float s_dot(const float* a, const float* b, int64_t n) { return scalar::dot(a, b, n); }
void s_gemm_nn(int M, int N, int K, const float* A, int lda, const float* B, int ldb,
               float* C, int ldc, bool acc) {
  scalar::gemm_nn(M, N, K, A, lda, B, ldb, C, ldc, acc);
}
void s_gemm_nt(int M, int N, int K, const float* A, int lda, const float* B, int ldb,
               float* C, int ldc, bool acc) {
  scalar::gemm_nt(M, N, K, A, lda, B, ldb, C, ldc, acc);
}
void s_gemm_tn(int M, int N, int K, const float* A, int lda, const float* B, int ldb,
               float* C, int ldc, bool acc) {
  scalar::gemm_tn(M, N, K, A, lda, B, ldb, C, ldc, acc);
}

}  // namespace

const FloatKernels& scalar_float_table() {
  static const FloatKernels t = {
      s_add, s_sub, s_mul, s_scale, s_axpy, s_relu, s_relu_bwd,
      s_sum, s_dot, s_gemm_nn, s_gemm_nt, s_gemm_tn,
  };
  return t;
}

}  // namespace sftn::kern
