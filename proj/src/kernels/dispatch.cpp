#include "crtseg/errors.hpp"
#include "crtseg/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace crtseg::kernels {

namespace {

const Backend kScalar{&scalar::dot, &scalar::axpy, &scalar::gemm_nn};
#if defined(__x86_64__) || defined(_M_X64)
const Backend kAvx2{&avx2::dot, &avx2::axpy, &avx2::gemm_nn};
#endif
#if defined(__aarch64__)
const Backend kNeon{&neon::dot, &neon::axpy, &neon::gemm_nn};
#endif

Isa detect() noexcept {
    if (const char* env = std::getenv("CRTSEG_ISA")) {
        const std::string v(env);
        if (v == "scalar") return Isa::scalar;
        if (v == "avx2" && isa_supported(Isa::avx2)) return Isa::avx2;
        if (v == "neon" && isa_supported(Isa::neon)) return Isa::neon;
    }
    if (isa_supported(Isa::avx2)) return Isa::avx2;
    if (isa_supported(Isa::neon)) return Isa::neon;
    return Isa::scalar;
}

std::atomic<Isa>& current() {
    static std::atomic<Isa> isa{detect()};
    return isa;
}

// Below this many multiply-adds the threading overhead dominates.
constexpr std::size_t kParallelWork = std::size_t{1} << 18;

void transpose_into(std::vector<double>& out, const double* src, std::size_t ld,
                    std::size_t rows, std::size_t cols) {
    // src is rows x cols with leading dim ld; out becomes cols x rows.
    out.resize(rows * cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * ld + c];
}

}  // namespace

std::string_view isa_name(Isa isa) noexcept {
    switch (isa) {
        case Isa::scalar: return "scalar";
        case Isa::avx2: return "avx2";
        case Isa::neon: return "neon";
    }
    return "unknown";
}

bool isa_supported(Isa isa) noexcept {
    switch (isa) {
        case Isa::scalar: return true;
        case Isa::avx2:
#if (defined(__x86_64__) || defined(_M_X64)) && (defined(__GNUC__) || defined(__clang__))
            return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
            return false;
#endif
        case Isa::neon:
#if defined(__aarch64__)
            return true;
#else
            return false;
#endif
    }
    return false;
}

Isa active_isa() noexcept { return current().load(std::memory_order_relaxed); }

void set_isa(Isa isa) {
    if (!isa_supported(isa))
        throw ValidationError("ISA " + std::string(isa_name(isa)) + " is not supported on this CPU");
    current().store(isa, std::memory_order_relaxed);
}

const Backend& backend(Isa isa) {
    switch (isa) {
#if defined(__x86_64__) || defined(_M_X64)
        case Isa::avx2: return kAvx2;
#endif
#if defined(__aarch64__)
        case Isa::neon: return kNeon;
#endif
        default: return kScalar;
    }
}

double dot(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw ValidationError("dot: length mismatch");
    return backend(active_isa()).dot(x.data(), y.data(), x.size());
}

void axpy(double a, std::span<const double> x, std::span<double> y) {
    if (x.size() != y.size()) throw ValidationError("axpy: length mismatch");
    backend(active_isa()).axpy(a, x.data(), y.data(), x.size());
}

void gemm(Trans trans_a, Trans trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta,
          double* c, std::size_t ldc) {
    if (m == 0 || n == 0) return;
    for (std::size_t i = 0; i < m; ++i) {
        double* row = c + i * ldc;
        if (beta == 0.0)
            std::fill(row, row + n, 0.0);
        else if (beta != 1.0)
            for (std::size_t j = 0; j < n; ++j) row[j] *= beta;
    }
    if (k == 0) return;

    thread_local std::vector<double> pack_a, pack_b;
    if (trans_a == Trans::yes) {
        transpose_into(pack_a, a, lda, k, m);
        a = pack_a.data();
        lda = k;
    }
    if (trans_b == Trans::yes) {
        transpose_into(pack_b, b, ldb, n, k);
        b = pack_b.data();
        ldb = n;
    }

    const auto kernel = backend(active_isa()).gemm_nn;
#ifdef _OPENMP
    const int threads = omp_get_max_threads();
    if (threads > 1 && m * n * k >= kParallelWork) {
        // Partition along the longer output axis; each output element is
        // still produced by exactly one thread.
        if (n >= m) {
            const std::size_t chunk = ((n + threads - 1) / threads + 7) / 8 * 8;
#pragma omp parallel for schedule(static)
            for (long t = 0; t < threads; ++t) {
                const std::size_t j0 = static_cast<std::size_t>(t) * chunk;
                if (j0 >= n) continue;
                const std::size_t jn = std::min(chunk, n - j0);
                kernel(m, jn, k, a, lda, b + j0, ldb, c + j0, ldc);
            }
        } else {
            const std::size_t chunk = ((m + threads - 1) / threads + 3) / 4 * 4;
#pragma omp parallel for schedule(static)
            for (long t = 0; t < threads; ++t) {
                const std::size_t i0 = static_cast<std::size_t>(t) * chunk;
                if (i0 >= m) continue;
                const std::size_t in = std::min(chunk, m - i0);
                kernel(in, n, k, a + i0 * lda, lda, b, ldb, c + i0 * ldc, ldc);
            }
        }
        return;
    }
#endif
    kernel(m, n, k, a, lda, b, ldb, c, ldc);
}

}  // namespace crtseg::kernels
