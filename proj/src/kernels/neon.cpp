#include "crtseg/kernels.hpp"

#if defined(__aarch64__)

#include <arm_neon.h>

#include <cmath>

namespace crtseg::kernels::neon {

double dot(const double* x, const double* y, std::size_t n) {
    float64x2_t acc0 = vdupq_n_f64(0.0);
    float64x2_t acc1 = vdupq_n_f64(0.0);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        acc0 = vfmaq_f64(acc0, vld1q_f64(x + i), vld1q_f64(y + i));
        acc1 = vfmaq_f64(acc1, vld1q_f64(x + i + 2), vld1q_f64(y + i + 2));
    }
    double acc = vaddvq_f64(vaddq_f64(acc0, acc1));
    for (; i < n; ++i) acc = std::fma(x[i], y[i], acc);
    return acc;
}

void axpy(double a, const double* x, double* y, std::size_t n) {
    const float64x2_t av = vdupq_n_f64(a);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) vst1q_f64(y + i, vfmaq_f64(vld1q_f64(y + i), av, vld1q_f64(x + i)));
    for (; i < n; ++i) y[i] = std::fma(a, x[i], y[i]);
}

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
             const double* b, std::size_t ldb, double* c, std::size_t ldc) {
    std::size_t i = 0;
    for (; i + 2 <= m; i += 2) {
        const double* a0 = a + i * lda;
        const double* a1 = a0 + lda;
        double* c0 = c + i * ldc;
        double* c1 = c0 + ldc;
        std::size_t j = 0;
        for (; j + 4 <= n; j += 4) {
            float64x2_t r00 = vld1q_f64(c0 + j), r01 = vld1q_f64(c0 + j + 2);
            float64x2_t r10 = vld1q_f64(c1 + j), r11 = vld1q_f64(c1 + j + 2);
            for (std::size_t p = 0; p < k; ++p) {
                const double* bp = b + p * ldb + j;
                const float64x2_t b0 = vld1q_f64(bp), b1 = vld1q_f64(bp + 2);
                r00 = vfmaq_n_f64(r00, b0, a0[p]);
                r01 = vfmaq_n_f64(r01, b1, a0[p]);
                r10 = vfmaq_n_f64(r10, b0, a1[p]);
                r11 = vfmaq_n_f64(r11, b1, a1[p]);
            }
            vst1q_f64(c0 + j, r00);
            vst1q_f64(c0 + j + 2, r01);
            vst1q_f64(c1 + j, r10);
            vst1q_f64(c1 + j + 2, r11);
        }
        for (; j < n; ++j) {
            double s0 = c0[j], s1 = c1[j];
            for (std::size_t p = 0; p < k; ++p) {
                s0 = std::fma(a0[p], b[p * ldb + j], s0);
                s1 = std::fma(a1[p], b[p * ldb + j], s1);
            }
            c0[j] = s0;
            c1[j] = s1;
        }
    }
    for (; i < m; ++i) {
        const double* arow = a + i * lda;
        double* crow = c + i * ldc;
        for (std::size_t j = 0; j < n; ++j) {
            double s = crow[j];
            for (std::size_t p = 0; p < k; ++p) s = std::fma(arow[p], b[p * ldb + j], s);
            crow[j] = s;
        }
    }
}

}  // namespace crtseg::kernels::neon

#endif
