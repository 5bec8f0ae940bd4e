#include "angiodg/kernels.hpp"

namespace angiodg::kernels::scalar {

void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const float* A, std::size_t lda,
             const float* B, std::size_t ldb, float* C, std::size_t ldc) {
    for (std::size_t i = 0; i < M; ++i) {
        float* c = C + i * ldc;
        for (std::size_t k = 0; k < K; ++k) {
            const float a = A[i * lda + k];
            if (a == 0.0f) continue;
            const float* b = B + k * ldb;
            for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
        }
    }
}

void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const float* A, std::size_t lda,
             const float* B, std::size_t ldb, float* C, std::size_t ldc) {
    for (std::size_t i = 0; i < M; ++i) {
        for (std::size_t j = 0; j < N; ++j) {
            C[i * ldc + j] += dot(A + i * lda, B + j * ldb, K);
        }
    }
}

float dot(const float* x, const float* y, std::size_t n) {
    float acc = 0.0f;
    for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
    return acc;
}

void axpy(std::size_t n, float alpha, const float* x, float* y) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace angiodg::kernels::scalar
