// Compiled with -mavx2 -mfma; only reached when CPUID reports both.
#include "crtseg/kernels.hpp"

#include <immintrin.h>

#include <algorithm>
#include <cmath>

namespace crtseg::kernels::avx2 {

namespace {

constexpr std::size_t kBlockK = 256;
constexpr std::size_t kBlockN = 512;

inline double hsum(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d sw = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, sw));
}

// C[4x8] += A[4xk] * B[kx8]
inline void kernel_4x8(std::size_t k, const double* a, std::size_t lda, const double* b,
                       std::size_t ldb, double* c, std::size_t ldc) {
    __m256d c00 = _mm256_loadu_pd(c), c01 = _mm256_loadu_pd(c + 4);
    __m256d c10 = _mm256_loadu_pd(c + ldc), c11 = _mm256_loadu_pd(c + ldc + 4);
    __m256d c20 = _mm256_loadu_pd(c + 2 * ldc), c21 = _mm256_loadu_pd(c + 2 * ldc + 4);
    __m256d c30 = _mm256_loadu_pd(c + 3 * ldc), c31 = _mm256_loadu_pd(c + 3 * ldc + 4);
    for (std::size_t p = 0; p < k; ++p) {
        const double* bp = b + p * ldb;
        const __m256d b0 = _mm256_loadu_pd(bp);
        const __m256d b1 = _mm256_loadu_pd(bp + 4);
        __m256d av = _mm256_broadcast_sd(a + p);
        c00 = _mm256_fmadd_pd(av, b0, c00);
        c01 = _mm256_fmadd_pd(av, b1, c01);
        av = _mm256_broadcast_sd(a + lda + p);
        c10 = _mm256_fmadd_pd(av, b0, c10);
        c11 = _mm256_fmadd_pd(av, b1, c11);
        av = _mm256_broadcast_sd(a + 2 * lda + p);
        c20 = _mm256_fmadd_pd(av, b0, c20);
        c21 = _mm256_fmadd_pd(av, b1, c21);
        av = _mm256_broadcast_sd(a + 3 * lda + p);
        c30 = _mm256_fmadd_pd(av, b0, c30);
        c31 = _mm256_fmadd_pd(av, b1, c31);
    }
    _mm256_storeu_pd(c, c00);
    _mm256_storeu_pd(c + 4, c01);
    _mm256_storeu_pd(c + ldc, c10);
    _mm256_storeu_pd(c + ldc + 4, c11);
    _mm256_storeu_pd(c + 2 * ldc, c20);
    _mm256_storeu_pd(c + 2 * ldc + 4, c21);
    _mm256_storeu_pd(c + 3 * ldc, c30);
    _mm256_storeu_pd(c + 3 * ldc + 4, c31);
}

// C[1x8] += A[1xk] * B[kx8]
inline void kernel_1x8(std::size_t k, const double* a, const double* b, std::size_t ldb,
                       double* c) {
    __m256d c0 = _mm256_loadu_pd(c), c1 = _mm256_loadu_pd(c + 4);
    for (std::size_t p = 0; p < k; ++p) {
        const double* bp = b + p * ldb;
        const __m256d av = _mm256_broadcast_sd(a + p);
        c0 = _mm256_fmadd_pd(av, _mm256_loadu_pd(bp), c0);
        c1 = _mm256_fmadd_pd(av, _mm256_loadu_pd(bp + 4), c1);
    }
    _mm256_storeu_pd(c, c0);
    _mm256_storeu_pd(c + 4, c1);
}

// C[1x4] += A[1xk] * B[kx4]
inline void kernel_1x4(std::size_t k, const double* a, const double* b, std::size_t ldb,
                       double* c) {
    __m256d c0 = _mm256_loadu_pd(c);
    for (std::size_t p = 0; p < k; ++p)
        c0 = _mm256_fmadd_pd(_mm256_broadcast_sd(a + p), _mm256_loadu_pd(b + p * ldb), c0);
    _mm256_storeu_pd(c, c0);
}

inline void kernel_1x1(std::size_t k, const double* a, const double* b, std::size_t ldb,
                       double* c) {
    double acc = *c;
    for (std::size_t p = 0; p < k; ++p) acc = std::fma(a[p], b[p * ldb], acc);
    *c = acc;
}

}  // namespace

double dot(const double* x, const double* y, std::size_t n) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
        acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i + 4), _mm256_loadu_pd(y + i + 4), acc1);
    }
    for (; i + 4 <= n; i += 4)
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
    double acc = hsum(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) acc = std::fma(x[i], y[i], acc);
    return acc;
}

void axpy(double a, const double* x, double* y, std::size_t n) {
    const __m256d av = _mm256_set1_pd(a);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(y + i,
                         _mm256_fmadd_pd(av, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
    for (; i < n; ++i) y[i] = std::fma(a, x[i], y[i]);
}

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
             const double* b, std::size_t ldb, double* c, std::size_t ldc) {
    for (std::size_t j0 = 0; j0 < n; j0 += kBlockN) {
        const std::size_t jn = std::min(kBlockN, n - j0);
        // Splitting k keeps the per-element FMA chain intact: the partial sum
        // is stored into C and picked up again by the next block.
        for (std::size_t p0 = 0; p0 < k; p0 += kBlockK) {
            const std::size_t pk = std::min(kBlockK, k - p0);
            const double* bblk = b + p0 * ldb + j0;
            std::size_t i = 0;
            for (; i + 4 <= m; i += 4) {
                const double* ablk = a + i * lda + p0;
                double* cblk = c + i * ldc + j0;
                std::size_t j = 0;
                for (; j + 8 <= jn; j += 8) kernel_4x8(pk, ablk, lda, bblk + j, ldb, cblk + j, ldc);
                for (; j + 4 <= jn; j += 4)
                    for (std::size_t r = 0; r < 4; ++r)
                        kernel_1x4(pk, ablk + r * lda, bblk + j, ldb, cblk + r * ldc + j);
                for (; j < jn; ++j)
                    for (std::size_t r = 0; r < 4; ++r)
                        kernel_1x1(pk, ablk + r * lda, bblk + j, ldb, cblk + r * ldc + j);
            }
            for (; i < m; ++i) {
                const double* arow = a + i * lda + p0;
                double* crow = c + i * ldc + j0;
                std::size_t j = 0;
                for (; j + 8 <= jn; j += 8) kernel_1x8(pk, arow, bblk + j, ldb, crow + j);
                for (; j + 4 <= jn; j += 4) kernel_1x4(pk, arow, bblk + j, ldb, crow + j);
                for (; j < jn; ++j) kernel_1x1(pk, arow, bblk + j, ldb, crow + j);
            }
        }
    }
}

}  // namespace crtseg::kernels::avx2
