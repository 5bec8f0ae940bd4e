#include "angiodg/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

namespace angiodg::kernels {
namespace {

Isa detect() {
#ifdef ANGIODG_HAVE_AVX2_KERNELS
    if (const char* env = std::getenv("ANGIODG_ISA")) {
        const std::string v(env);
        if (v == "scalar") return Isa::scalar;
        if (v == "avx2" && isa_supported(Isa::avx2)) return Isa::avx2;
    }
    return isa_supported(Isa::avx2) ? Isa::avx2 : Isa::scalar;
#else
    return Isa::scalar;
#endif
}

std::atomic<Isa>& current() {
    static std::atomic<Isa> isa{detect()};
    return isa;
}

}  // namespace

bool isa_supported(Isa isa) {
    switch (isa) {
        case Isa::scalar:
            return true;
        case Isa::avx2:
#ifdef ANGIODG_HAVE_AVX2_KERNELS
            __builtin_cpu_init();
            return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
            return false;
#endif
    }
    return false;
}

Isa active_isa() { return current().load(std::memory_order_relaxed); }

std::string_view isa_name(Isa isa) { return isa == Isa::avx2 ? "avx2" : "scalar"; }

void force_isa(Isa isa) {
    if (!isa_supported(isa)) {
        throw std::invalid_argument("ISA not supported on this CPU: " + std::string(isa_name(isa)));
    }
    current().store(isa, std::memory_order_relaxed);
}

void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const float* A, std::size_t lda,
             const float* B, std::size_t ldb, float* C, std::size_t ldc) {
#ifdef ANGIODG_HAVE_AVX2_KERNELS
    if (active_isa() == Isa::avx2) return avx2::gemm_nn(M, N, K, A, lda, B, ldb, C, ldc);
#endif
    scalar::gemm_nn(M, N, K, A, lda, B, ldb, C, ldc);
}

void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const float* A, std::size_t lda,
             const float* B, std::size_t ldb, float* C, std::size_t ldc) {
#ifdef ANGIODG_HAVE_AVX2_KERNELS
    if (active_isa() == Isa::avx2) return avx2::gemm_nt(M, N, K, A, lda, B, ldb, C, ldc);
#endif
    scalar::gemm_nt(M, N, K, A, lda, B, ldb, C, ldc);
}

float dot(const float* x, const float* y, std::size_t n) {
#ifdef ANGIODG_HAVE_AVX2_KERNELS
    if (active_isa() == Isa::avx2) return avx2::dot(x, y, n);
#endif
    return scalar::dot(x, y, n);
}

void axpy(std::size_t n, float alpha, const float* x, float* y) {
#ifdef ANGIODG_HAVE_AVX2_KERNELS
    if (active_isa() == Isa::avx2) return avx2::axpy(n, alpha, x, y);
#endif
    scalar::axpy(n, alpha, x, y);
}

}  // namespace angiodg::kernels
