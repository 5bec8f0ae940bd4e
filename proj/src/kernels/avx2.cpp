// Compiled with -mavx2 -mfma; only reached through the dispatcher after a
// cpuid check.

#include "angiodg/kernels.hpp"

#include <immintrin.h>

#include <algorithm>
#include <vector>

namespace angiodg::kernels::avx2 {
namespace {

inline float hsum(__m256 v) noexcept {
    const __m128 lo = _mm256_castps256_ps128(v);
    const __m128 hi = _mm256_extractf128_ps(v, 1);
    __m128 s = _mm_add_ps(lo, hi);
    s = _mm_add_ps(s, _mm_movehl_ps(s, s));
    s = _mm_add_ss(s, _mm_movehdup_ps(s));
    return _mm_cvtss_f32(s);
}

// Blocking: K in slabs of kKc rows, B packed into contiguous kKc x 16 strips
// so the micro-kernel streams it linearly.
constexpr std::size_t kKc = 256;
constexpr std::size_t kNc = 1024;

// Copies B[k0..k0+kc, j0..j0+nc] into 16-wide strips; the last strip is zero padded.
void pack_b(std::size_t kc, std::size_t nc, const float* B, std::size_t ldb, float* out) noexcept {
    for (std::size_t j = 0; j < nc; j += 16) {
        const std::size_t w = std::min<std::size_t>(16, nc - j);
        float* dst = out + j * kc;
        if (w == 16) {
            for (std::size_t k = 0; k < kc; ++k) {
                _mm256_storeu_ps(dst + k * 16, _mm256_loadu_ps(B + k * ldb + j));
                _mm256_storeu_ps(dst + k * 16 + 8, _mm256_loadu_ps(B + k * ldb + j + 8));
            }
        } else {
            for (std::size_t k = 0; k < kc; ++k) {
                for (std::size_t q = 0; q < 16; ++q) dst[k * 16 + q] = q < w ? B[k * ldb + j + q] : 0.0f;
            }
        }
    }
}

// R rows of C (R <= 6) x 16 columns over a packed strip.
template <int R>
inline void micro(std::size_t K, const float* A, std::size_t lda, const float* Bp, float* C, std::size_t ldc,
                  std::size_t width) noexcept {
    __m256 c[R][2];
    for (int r = 0; r < R; ++r) c[r][0] = c[r][1] = _mm256_setzero_ps();
    for (std::size_t k = 0; k < K; ++k) {
        const __m256 b0 = _mm256_loadu_ps(Bp + k * 16);
        const __m256 b1 = _mm256_loadu_ps(Bp + k * 16 + 8);
        for (int r = 0; r < R; ++r) {
            const __m256 a = _mm256_broadcast_ss(A + r * lda + k);
            c[r][0] = _mm256_fmadd_ps(a, b0, c[r][0]);
            c[r][1] = _mm256_fmadd_ps(a, b1, c[r][1]);
        }
    }
    if (width == 16) {
        for (int r = 0; r < R; ++r) {
            float* row = C + r * ldc;
            _mm256_storeu_ps(row, _mm256_add_ps(_mm256_loadu_ps(row), c[r][0]));
            _mm256_storeu_ps(row + 8, _mm256_add_ps(_mm256_loadu_ps(row + 8), c[r][1]));
        }
    } else {
        alignas(32) float tmp[16];
        for (int r = 0; r < R; ++r) {
            _mm256_store_ps(tmp, c[r][0]);
            _mm256_store_ps(tmp + 8, c[r][1]);
            for (std::size_t q = 0; q < width; ++q) C[r * ldc + q] += tmp[q];
        }
    }
}

void micro_rows(std::size_t rows, std::size_t K, const float* A, std::size_t lda, const float* Bp, float* C,
                std::size_t ldc, std::size_t width) noexcept {
    switch (rows) {
        case 6: micro<6>(K, A, lda, Bp, C, ldc, width); break;
        case 5: micro<5>(K, A, lda, Bp, C, ldc, width); break;
        case 4: micro<4>(K, A, lda, Bp, C, ldc, width); break;
        case 3: micro<3>(K, A, lda, Bp, C, ldc, width); break;
        case 2: micro<2>(K, A, lda, Bp, C, ldc, width); break;
        default: micro<1>(K, A, lda, Bp, C, ldc, width); break;
    }
}

}  // namespace

void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const float* A, std::size_t lda,
             const float* B, std::size_t ldb, float* C, std::size_t ldc) {
    if (M == 0 || N == 0 || K == 0) return;
    thread_local std::vector<float> packed;
    packed.resize(kKc * ((kNc + 15) / 16) * 16);
    for (std::size_t j0 = 0; j0 < N; j0 += kNc) {
        const std::size_t nc = std::min(kNc, N - j0);
        for (std::size_t k0 = 0; k0 < K; k0 += kKc) {
            const std::size_t kc = std::min(kKc, K - k0);
            pack_b(kc, nc, B + k0 * ldb + j0, ldb, packed.data());
            for (std::size_t i = 0; i < M; i += 6) {
                const std::size_t rows = std::min<std::size_t>(6, M - i);
                for (std::size_t j = 0; j < nc; j += 16) {
                    micro_rows(rows, kc, A + i * lda + k0, lda, packed.data() + j * kc, C + i * ldc + j0 + j, ldc,
                               std::min<std::size_t>(16, nc - j));
                }
            }
        }
    }
}

void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const float* A, std::size_t lda,
             const float* B, std::size_t ldb, float* C, std::size_t ldc) {
    // 4 rows of A against 3 rows of B: 7 loads per 12 FMAs.
    const std::size_t k8 = (K / 8) * 8;
    std::size_t i = 0;
    for (; i + 4 <= M; i += 4) {
        const float* a[4] = {A + i * lda, A + (i + 1) * lda, A + (i + 2) * lda, A + (i + 3) * lda};
        std::size_t j = 0;
        for (; j + 3 <= N; j += 3) {
            const float* b[3] = {B + j * ldb, B + (j + 1) * ldb, B + (j + 2) * ldb};
            __m256 s[4][3];
            for (auto& row : s) row[0] = row[1] = row[2] = _mm256_setzero_ps();
            for (std::size_t k = 0; k < k8; k += 8) {
                const __m256 y0 = _mm256_loadu_ps(b[0] + k);
                const __m256 y1 = _mm256_loadu_ps(b[1] + k);
                const __m256 y2 = _mm256_loadu_ps(b[2] + k);
                for (int r = 0; r < 4; ++r) {
                    const __m256 x = _mm256_loadu_ps(a[r] + k);
                    s[r][0] = _mm256_fmadd_ps(x, y0, s[r][0]);
                    s[r][1] = _mm256_fmadd_ps(x, y1, s[r][1]);
                    s[r][2] = _mm256_fmadd_ps(x, y2, s[r][2]);
                }
            }
            for (int r = 0; r < 4; ++r) {
                for (int q = 0; q < 3; ++q) {
                    float acc = hsum(s[r][q]);
                    for (std::size_t k = k8; k < K; ++k) acc += a[r][k] * b[q][k];
                    C[(i + r) * ldc + j + q] += acc;
                }
            }
        }
        for (; j < N; ++j) {
            for (int r = 0; r < 4; ++r) C[(i + r) * ldc + j] += dot(a[r], B + j * ldb, K);
        }
    }
    for (; i < M; ++i) {
        for (std::size_t j = 0; j < N; ++j) C[i * ldc + j] += dot(A + i * lda, B + j * ldb, K);
    }
}

float dot(const float* x, const float* y, std::size_t n) {
    __m256 s0 = _mm256_setzero_ps(), s1 = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 16 <= n; i += 16) {
        s0 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), s0);
        s1 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i + 8), _mm256_loadu_ps(y + i + 8), s1);
    }
    for (; i + 8 <= n; i += 8) {
        s0 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), s0);
    }
    float acc = hsum(_mm256_add_ps(s0, s1));
    for (; i < n; ++i) acc += x[i] * y[i];
    return acc;
}

void axpy(std::size_t n, float alpha, const float* x, float* y) {
    const __m256 a = _mm256_set1_ps(alpha);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        _mm256_storeu_ps(y + i, _mm256_fmadd_ps(a, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
    }
    for (; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace angiodg::kernels::avx2
