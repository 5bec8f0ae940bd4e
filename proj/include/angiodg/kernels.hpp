#pragma once

#include <cstddef>
#include <string_view>

// Dense single-precision kernels used by the convolution layers.
//
// Every kernel has a portable scalar reference in angiodg::kernels::scalar and,
// on x86-64, an AVX2+FMA variant in angiodg::kernels::avx2. The free functions
// in angiodg::kernels dispatch to the best variant the CPU supports; the choice
// is made once per process (or forced with ANGIODG_ISA=scalar|avx2, or
// force_isa() in tests). Results of the two variants agree to float rounding,
// not bit-for-bit, so a single process always uses one variant throughout.
//
// Matrices are row-major with explicit leading dimensions.

namespace angiodg::kernels {

enum class Isa { scalar, avx2 };

Isa active_isa();
std::string_view isa_name(Isa isa);
bool isa_supported(Isa isa);
// Throws std::invalid_argument if the ISA is not supported on this CPU.
void force_isa(Isa isa);

// C[M x N] += A[M x K] * B[K x N]
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const float* A, std::size_t lda,
             const float* B, std::size_t ldb, float* C, std::size_t ldc);

// C[M x N] += A[M x K] * B[N x K]^T
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const float* A, std::size_t lda,
             const float* B, std::size_t ldb, float* C, std::size_t ldc);

float dot(const float* x, const float* y, std::size_t n);

// y += alpha * x
void axpy(std::size_t n, float alpha, const float* x, float* y);

namespace scalar {
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const float* A, std::size_t lda,
             const float* B, std::size_t ldb, float* C, std::size_t ldc);
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const float* A, std::size_t lda,
             const float* B, std::size_t ldb, float* C, std::size_t ldc);
float dot(const float* x, const float* y, std::size_t n);
void axpy(std::size_t n, float alpha, const float* x, float* y);
}  // namespace scalar

#if defined(__x86_64__) || defined(_M_X64)
#define ANGIODG_HAVE_AVX2_KERNELS 1
namespace avx2 {
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const float* A, std::size_t lda,
             const float* B, std::size_t ldb, float* C, std::size_t ldc);
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const float* A, std::size_t lda,
             const float* B, std::size_t ldb, float* C, std::size_t ldc);
float dot(const float* x, const float* y, std::size_t n);
void axpy(std::size_t n, float alpha, const float* x, float* y);
}  // namespace avx2
#endif

}  // namespace angiodg::kernels
