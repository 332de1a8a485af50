#include "mpic/matmul.h"

#include <cblas.h>

namespace mpic {

void gemm_nt(int m, int n, int k,
             const float* a, int lda,
             const float* b, int ldb,
             float* c, int ldc) {
    cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans,
                m, n, k, 1.0f, a, lda, b, ldb, 0.0f, c, ldc);
}

void gemm_nn(int m, int n, int k,
             const float* a, int lda,
             const float* b, int ldb,
             float* c, int ldc) {
    cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans,
                m, n, k, 1.0f, a, lda, b, ldb, 0.0f, c, ldc);
}

void set_compute_threads(int n) {
    openblas_set_num_threads(n);
}

} // namespace mpic
