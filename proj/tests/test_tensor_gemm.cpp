#include <doctest.h>

#include "dskd/gemm.hpp"
#include "dskd/tensor.hpp"
#include "test_utils.hpp"

using namespace dskd;

namespace {

void naive_gemm(const float* A, const float* B, float* C, int M, int K, int N,
                bool accumulate) {
    for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j) {
            double s = accumulate ? C[i * N + j] : 0.0;
            for (int k = 0; k < K; ++k)
                s += static_cast<double>(A[i * K + k]) * B[static_cast<size_t>(k) * N + j];
            C[i * N + j] = static_cast<float>(s);
        }
}

}  // namespace

TEST_CASE("tensor shape and indexing") {
    Tensor t(2, 3, 4, 5);
    CHECK(t.size() == 120);
    t.at(1, 2, 3, 4) = 7.0f;
    CHECK(t.data[119] == 7.0f);
    CHECK(t.shape_str() == "(2,3,4,5)");
    CHECK_THROWS_AS(Tensor(-1, 1, 1, 1), ShapeError);
    Tensor s = Tensor::scalar(3.5f);
    CHECK(s.size() == 1);
    CHECK(s.data[0] == 3.5f);
}

TEST_CASE("sgemm matches a naive reference across shapes") {
    Rng rng(42);
    // deliberately awkward sizes around the 4x32 tiles and the KC block
    const int cases[][3] = {{1, 1, 1},   {3, 5, 7},    {4, 32, 32},  {7, 100, 45},
                            {64, 9, 33}, {33, 321, 17}, {96, 576, 256}, {5, 640, 130}};
    for (const auto& c : cases) {
        const int M = c[0], K = c[1], N = c[2];
        std::vector<float> A(static_cast<size_t>(M) * K), B(static_cast<size_t>(K) * N);
        for (auto& v : A) v = rng.uniform(-1.0f, 1.0f);
        for (auto& v : B) v = rng.uniform(-1.0f, 1.0f);
        std::vector<float> C(static_cast<size_t>(M) * N, 0.5f), Cr(C);
        detail::sgemm(A.data(), B.data(), C.data(), M, K, N, /*accumulate=*/false);
        naive_gemm(A.data(), B.data(), Cr.data(), M, K, N, false);
        float maxdiff = 0.0f;
        for (size_t i = 0; i < C.size(); ++i) maxdiff = std::max(maxdiff, std::fabs(C[i] - Cr[i]));
        CHECK(maxdiff < 1e-3f * std::max(1, K / 8));

        // accumulate path
        detail::sgemm(A.data(), B.data(), C.data(), M, K, N, /*accumulate=*/true);
        naive_gemm(A.data(), B.data(), Cr.data(), M, K, N, true);
        maxdiff = 0.0f;
        for (size_t i = 0; i < C.size(); ++i) maxdiff = std::max(maxdiff, std::fabs(C[i] - Cr[i]));
        CHECK(maxdiff < 2e-3f * std::max(1, K / 8));
    }
}

TEST_CASE("sgemm is deterministic across repeated calls") {
    Rng rng(7);
    const int M = 61, K = 333, N = 97;
    std::vector<float> A(static_cast<size_t>(M) * K), B(static_cast<size_t>(K) * N);
    for (auto& v : A) v = rng.uniform(-1.0f, 1.0f);
    for (auto& v : B) v = rng.uniform(-1.0f, 1.0f);
    std::vector<float> C1(static_cast<size_t>(M) * N), C2(C1);
    detail::sgemm(A.data(), B.data(), C1.data(), M, K, N);
    detail::sgemm(A.data(), B.data(), C2.data(), M, K, N);
    CHECK(std::memcmp(C1.data(), C2.data(), C1.size() * sizeof(float)) == 0);
}

TEST_CASE("transpose round-trips") {
    Rng rng(3);
    const int M = 37, K = 53;
    std::vector<float> A(static_cast<size_t>(M) * K), T(A.size()), R(A.size());
    for (auto& v : A) v = rng.uniform(-1.0f, 1.0f);
    detail::transpose(A.data(), T.data(), M, K);
    detail::transpose(T.data(), R.data(), K, M);
    CHECK(std::memcmp(A.data(), R.data(), A.size() * sizeof(float)) == 0);
    CHECK(T[5 * M + 2] == A[2 * K + 5]);
}

TEST_CASE("rng streams are deterministic and fork-independent") {
    Rng a(123), b(123);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng c(123);
    Rng f1 = c.fork(1), f2 = c.fork(2);
    CHECK(f1.next_u64() != f2.next_u64());
    // uniform stays in range
    Rng d(9);
    for (int i = 0; i < 1000; ++i) {
        const float u = d.uniform();
        CHECK(u >= 0.0f);
        CHECK(u < 1.0f);
    }
}
