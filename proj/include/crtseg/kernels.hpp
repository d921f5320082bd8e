#pragma once

// Dense arithmetic kernels shared by the encoder, the attention block and the
// prototype head. Every routine has a portable scalar reference and, where the
// target allows it, a SIMD variant (AVX2+FMA on x86-64, NEON on AArch64). The
// variant is chosen once at startup from CPUID and can be forced with the
// CRTSEG_ISA environment variable ("scalar", "avx2", "neon").
//
// Matrices are row-major double precision with explicit leading dimensions.
// For each output element the reduction runs over k in ascending order in a
// single accumulator, so results do not depend on how work is split across
// threads.

#include <cstddef>
#include <span>
#include <string_view>

namespace crtseg::kernels {

enum class Isa { scalar, avx2, neon };

enum class Trans { no, yes };

std::string_view isa_name(Isa isa) noexcept;
bool isa_supported(Isa isa) noexcept;

Isa active_isa() noexcept;
// Throws ValidationError when the requested ISA is not available on this CPU.
void set_isa(Isa isa);

double dot(std::span<const double> x, std::span<const double> y);
// y += a * x
void axpy(double a, std::span<const double> x, std::span<double> y);

// C = beta * C + op(A) * op(B), op(A) is m x k, op(B) is k x n.
void gemm(Trans trans_a, Trans trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta,
          double* c, std::size_t ldc);

// Backend entry points, exposed so the equivalence tests can call each
// variant directly. gemm_nn accumulates: C += A * B.
struct Backend {
    double (*dot)(const double* x, const double* y, std::size_t n);
    void (*axpy)(double a, const double* x, double* y, std::size_t n);
    void (*gemm_nn)(std::size_t m, std::size_t n, std::size_t k, const double* a,
                    std::size_t lda, const double* b, std::size_t ldb, double* c,
                    std::size_t ldc);
};

const Backend& backend(Isa isa);

namespace scalar {
double dot(const double* x, const double* y, std::size_t n);
void axpy(double a, const double* x, double* y, std::size_t n);
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
             const double* b, std::size_t ldb, double* c, std::size_t ldc);
}  // namespace scalar

#if defined(__x86_64__) || defined(_M_X64)
namespace avx2 {
double dot(const double* x, const double* y, std::size_t n);
void axpy(double a, const double* x, double* y, std::size_t n);
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
             const double* b, std::size_t ldb, double* c, std::size_t ldc);
}  // namespace avx2
#endif

#if defined(__aarch64__)
namespace neon {
double dot(const double* x, const double* y, std::size_t n);
void axpy(double a, const double* x, double* y, std::size_t n);
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
             const double* b, std::size_t ldb, double* c, std::size_t ldc);
}  // namespace neon
#endif

}  // namespace crtseg::kernels
