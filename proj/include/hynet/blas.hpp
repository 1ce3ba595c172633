#pragma once

// Thin row-major wrapper over CBLAS dgemm. All heavy inner products in the
// library (matmul, convolution via im2col, pairwise distances) go through
// here; everything else is plain loops.

#include <cstddef>

#include <cblas.h>

namespace hynet::blas {

// C[m,n] (+)= alpha * op(A) * op(B), row-major. lda/ldb/ldc are the leading
// dimensions of the stored (untransposed) matrices.
inline void dgemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n,
                  std::size_t k, double alpha, const double* a, std::size_t lda,
                  const double* b, std::size_t ldb, double beta, double* c,
                  std::size_t ldc) {
  if (m == 0 || n == 0) return;
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), alpha, a,
              static_cast<int>(lda), b, static_cast<int>(ldb), beta, c,
              static_cast<int>(ldc));
}

// Convenience: contiguous row-major operands with natural leading dimensions.
inline void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n,
                 std::size_t k, double alpha, const double* a, const double* b,
                 double beta, double* c) {
  dgemm(trans_a, trans_b, m, n, k, alpha, a, trans_a ? m : k, b,
        trans_b ? k : n, beta, c, n);
}

inline void pin_single_thread() {
#ifdef OPENBLAS_VERSION
  openblas_set_num_threads(1);
#endif
}

}  // namespace hynet::blas
