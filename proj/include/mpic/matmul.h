#pragma once

#include <cstdint>

namespace mpic {

// Thin wrappers over sgemm, row-major. Reduction order over k is fixed per
// output element independent of blocking, so results are bit-stable for a
// given input regardless of shape or thread count.

// C[m x n] = A[m x k] * B[n x k]^T
void gemm_nt(int m, int n, int k,
             const float* a, int lda,
             const float* b, int ldb,
             float* c, int ldc);

// C[m x n] = A[m x k] * B[k x n]
void gemm_nn(int m, int n, int k,
             const float* a, int lda,
             const float* b, int ldb,
             float* c, int ldc);

void set_compute_threads(int n);

} // namespace mpic
