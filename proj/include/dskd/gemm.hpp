#pragma once

#include <algorithm>
#include <cstring>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace dskd {
namespace detail {

// Row-major SGEMM, C[M,N] (+)= A[M,K] * B[K,N].
//
// One kernel serves every conv path; backward passes transpose their operands
// and reuse it. Both operands are repacked tile-major up front so the 4x32
// microkernel streams contiguous memory. Each C element is accumulated
// sequentially by exactly one thread in ascending-k order, which keeps the
// result bit-deterministic regardless of thread count.

inline constexpr int kGemmMR = 4;    // microkernel rows
inline constexpr int kGemmNR = 32;   // microkernel cols
inline constexpr int kGemmKC = 320;  // k block per panel sweep
inline constexpr int kGemmNC = 192;  // cols per task block
inline constexpr int kGemmMBand = 96;  // rows per task block

// A packed as [row_tile][k][4], zero-padded to a multiple of 4 rows.
inline void pack_a(const float* A, int M, int K, float* Ap) {
    const int tiles = (M + kGemmMR - 1) / kGemmMR;
#pragma omp parallel for schedule(static)
    for (int t = 0; t < tiles; ++t) {
        float* dst = Ap + static_cast<size_t>(t) * K * kGemmMR;
        const int rows = std::min(kGemmMR, M - t * kGemmMR);
        for (int k = 0; k < K; ++k) {
            for (int r = 0; r < kGemmMR; ++r)
                dst[static_cast<size_t>(k) * kGemmMR + r] =
                    r < rows ? A[(static_cast<size_t>(t) * kGemmMR + r) * K + k] : 0.0f;
        }
    }
}

// B packed as [col_tile][k][32], zero-padded to a multiple of 32 cols.
inline void pack_b(const float* B, int K, int N, float* Bp) {
    const int tiles = (N + kGemmNR - 1) / kGemmNR;
#pragma omp parallel for schedule(static)
    for (int t = 0; t < tiles; ++t) {
        float* dst = Bp + static_cast<size_t>(t) * K * kGemmNR;
        const int cols = std::min(kGemmNR, N - t * kGemmNR);
        for (int k = 0; k < K; ++k) {
            const float* src = B + static_cast<size_t>(k) * N + t * kGemmNR;
            float* d = dst + static_cast<size_t>(k) * kGemmNR;
            for (int c = 0; c < cols; ++c) d[c] = src[c];
            for (int c = cols; c < kGemmNR; ++c) d[c] = 0.0f;
        }
    }
}

// 4x32 FMA kernel over one k range of packed panels; accumulates into C.
inline void gemm_micro(const float* __restrict ap, const float* __restrict bp, int kc,
                       float* __restrict c, int ldc, int rows, int cols) {
    float acc[kGemmMR][kGemmNR];
    for (auto& row : acc)
        for (float& v : row) v = 0.0f;
    for (int k = 0; k < kc; ++k) {
        const float* __restrict b = bp + static_cast<size_t>(k) * kGemmNR;
        const float* __restrict a = ap + static_cast<size_t>(k) * kGemmMR;
        for (int r = 0; r < kGemmMR; ++r) {
            const float ar = a[r];
            for (int l = 0; l < kGemmNR; ++l) acc[r][l] += ar * b[l];
        }
    }
    if (rows == kGemmMR && cols == kGemmNR) {
        for (int r = 0; r < kGemmMR; ++r) {
            float* cr = c + static_cast<size_t>(r) * ldc;
            for (int l = 0; l < kGemmNR; ++l) cr[l] += acc[r][l];
        }
    } else {
        for (int r = 0; r < rows; ++r) {
            float* cr = c + static_cast<size_t>(r) * ldc;
            for (int l = 0; l < cols; ++l) cr[l] += acc[r][l];
        }
    }
}

struct GemmScratch {
    std::vector<float> a, b;
};

inline GemmScratch& gemm_scratch() {
    static thread_local GemmScratch s;
    return s;
}

inline void sgemm(const float* A, const float* B, float* C, int M, int K, int N,
                  bool accumulate = false) {
    if (M <= 0 || K <= 0 || N <= 0) return;
    if (!accumulate)
        std::memset(C, 0, static_cast<size_t>(M) * N * sizeof(float));

    const int m_tiles = (M + kGemmMR - 1) / kGemmMR;
    const int n_tiles = (N + kGemmNR - 1) / kGemmNR;
    GemmScratch& scratch = gemm_scratch();
    scratch.a.resize(static_cast<size_t>(m_tiles) * K * kGemmMR);
    scratch.b.resize(static_cast<size_t>(n_tiles) * K * kGemmNR);
    pack_a(A, M, K, scratch.a.data());
    pack_b(B, K, N, scratch.b.data());
    const float* Ap = scratch.a.data();
    const float* Bp = scratch.b.data();

    const int n_blocks = (N + kGemmNC - 1) / kGemmNC;
    const int m_bands = (M + kGemmMBand - 1) / kGemmMBand;
    const int tasks = n_blocks * m_bands;

#pragma omp parallel for schedule(static)
    for (int task = 0; task < tasks; ++task) {
        const int nb = task / m_bands;
        const int mb = task % m_bands;
        const int j0 = nb * kGemmNC;
        const int j1 = std::min(j0 + kGemmNC, N);
        const int i0 = mb * kGemmMBand;
        const int i1 = std::min(i0 + kGemmMBand, M);
        for (int k0 = 0; k0 < K; k0 += kGemmKC) {
            const int kc = std::min(kGemmKC, K - k0);
            for (int i = i0; i < i1; i += kGemmMR) {
                const int rows = std::min(kGemmMR, M - i);
                const float* ap =
                    Ap + (static_cast<size_t>(i / kGemmMR) * K + k0) * kGemmMR;
                for (int j = j0; j < j1; j += kGemmNR) {
                    const int cols = std::min(kGemmNR, N - j);
                    const float* bp =
                        Bp + (static_cast<size_t>(j / kGemmNR) * K + k0) * kGemmNR;
                    gemm_micro(ap, bp, kc, C + static_cast<size_t>(i) * N + j, N, rows, cols);
                }
            }
        }
    }
}

// Dot-product form, C[M,P] (+)= sum_r A[m,r] * B[p,r]. Both operands stream
// contiguously along r; used for weight gradients (dW = dY * cols^T) where
// transposing cols would dominate. The r-chunking keeps the B panel resident;
// per C element the chunk partial sums are added in ascending-r order by the
// construction of the loops, so results stay deterministic.
inline constexpr int kAbtRC = 1024;  // r chunk
inline constexpr int kAbtPB = 128;   // B rows per panel

template <int ROWS, int COLS>
inline void abt_micro(const float* __restrict a, const float* __restrict b, int lda, int ldb,
                      int rc, float* __restrict c, int ldc) {
    float acc[ROWS][COLS][16] = {};
    float avec[ROWS][16], bvec[COLS][16];
    int r = 0;
    for (; r + 16 <= rc; r += 16) {
        for (int i = 0; i < ROWS; ++i)
            for (int l = 0; l < 16; ++l) avec[i][l] = a[static_cast<size_t>(i) * lda + r + l];
        for (int j = 0; j < COLS; ++j)
            for (int l = 0; l < 16; ++l) bvec[j][l] = b[static_cast<size_t>(j) * ldb + r + l];
        for (int i = 0; i < ROWS; ++i)
            for (int j = 0; j < COLS; ++j)
                for (int l = 0; l < 16; ++l) acc[i][j][l] += avec[i][l] * bvec[j][l];
    }
    float tail[ROWS][COLS] = {};
    for (; r < rc; ++r)
        for (int i = 0; i < ROWS; ++i)
            for (int j = 0; j < COLS; ++j)
                tail[i][j] += a[static_cast<size_t>(i) * lda + r] *
                              b[static_cast<size_t>(j) * ldb + r];
    for (int i = 0; i < ROWS; ++i) {
        for (int j = 0; j < COLS; ++j) {
            float s = tail[i][j];
            for (int l = 0; l < 16; ++l) s += acc[i][j][l];
            c[static_cast<size_t>(i) * ldc + j] += s;
        }
    }
}

inline void sgemm_abt(const float* A, const float* B, float* C, int M, int R, int P,
                      bool accumulate = false) {
    if (M <= 0 || R <= 0 || P <= 0) return;
    if (!accumulate) std::memset(C, 0, static_cast<size_t>(M) * P * sizeof(float));
    for (int p0 = 0; p0 < P; p0 += kAbtPB) {
        const int pb = std::min(kAbtPB, P - p0);
        for (int r0 = 0; r0 < R; r0 += kAbtRC) {
            const int rc = std::min(kAbtRC, R - r0);
            const int m_tiles = (M + 3) / 4;
#pragma omp parallel for schedule(static)
            for (int mt = 0; mt < m_tiles; ++mt) {
                const int m0 = mt * 4;
                const int rows = std::min(4, M - m0);
                const float* a = A + static_cast<size_t>(m0) * R + r0;
                int p = p0;
                for (; p + 2 <= p0 + pb; p += 2) {
                    const float* b = B + static_cast<size_t>(p) * R + r0;
                    float* c = C + static_cast<size_t>(m0) * P + p;
                    switch (rows) {
                        case 4: abt_micro<4, 2>(a, b, R, R, rc, c, P); break;
                        case 3: abt_micro<3, 2>(a, b, R, R, rc, c, P); break;
                        case 2: abt_micro<2, 2>(a, b, R, R, rc, c, P); break;
                        default: abt_micro<1, 2>(a, b, R, R, rc, c, P); break;
                    }
                }
                if (p < p0 + pb) {
                    const float* b = B + static_cast<size_t>(p) * R + r0;
                    float* c = C + static_cast<size_t>(m0) * P + p;
                    switch (rows) {
                        case 4: abt_micro<4, 1>(a, b, R, R, rc, c, P); break;
                        case 3: abt_micro<3, 1>(a, b, R, R, rc, c, P); break;
                        case 2: abt_micro<2, 1>(a, b, R, R, rc, c, P); break;
                        default: abt_micro<1, 1>(a, b, R, R, rc, c, P); break;
                    }
                }
            }
        }
    }
}

// Blocked out-of-place transpose, B[K,M] = A[M,K]^T.
inline void transpose(const float* A, float* B, int M, int K) {
    constexpr int TB = 32;
#pragma omp parallel for schedule(static)
    for (int ib = 0; ib < (M + TB - 1) / TB; ++ib) {
        const int i0 = ib * TB;
        const int i1 = std::min(i0 + TB, M);
        for (int j0 = 0; j0 < K; j0 += TB) {
            const int j1 = std::min(j0 + TB, K);
            for (int i = i0; i < i1; ++i)
                for (int j = j0; j < j1; ++j)
                    B[static_cast<size_t>(j) * M + i] = A[static_cast<size_t>(i) * K + j];
        }
    }
}

}  // namespace detail
}  // namespace dskd
