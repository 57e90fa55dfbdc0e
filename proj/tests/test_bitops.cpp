#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "bivit/bitmatrix.hpp"
#include "bivit/errors.hpp"
#include "support.hpp"

using namespace bivit;

TEST_CASE("pack_signs maps sign with sign(0) = +1") {
    const std::vector<double> m = {0.5, -0.2, -1.0, 0.0};
    const BitMatrix b = pack_signs(m, 2, 2);
    CHECK(b.bit(0, 0));
    CHECK_FALSE(b.bit(0, 1));
    CHECK_FALSE(b.bit(1, 0));
    CHECK(b.bit(1, 1));  // sign(0) := +1
    CHECK(b.canonical());
}

TEST_CASE("pack_signs sets every bit for an all-positive matrix") {
    const std::vector<double> m(9, 3.25);
    const BitMatrix b = pack_signs(m, 3, 3);
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < 3; ++c) CHECK(b.bit(r, c));
}

TEST_CASE("pack/unpack round-trips against the scalar sign oracle") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 1000; ++trial) {
        std::uniform_int_distribution<std::size_t> rdist(1, 5), cdist(1, 130);
        const std::size_t rows = rdist(rng), cols = cdist(rng);
        const auto m = testsup::random_matrix(rows, cols, rng);
        const BitMatrix b = pack_signs(m, rows, cols);
        REQUIRE(b.canonical());
        const auto u = unpack(b);
        for (std::size_t i = 0; i < m.size(); ++i) CHECK(u[i] == testsup::sign_pm1(m[i]));
        CHECK(pack_signs(u, rows, cols) == b);
    }
}

TEST_CASE("unpack of a single-row matrix") {
    const std::vector<double> m = {1.0, -1.0};
    const BitMatrix b = pack_signs(m, 1, 2);
    const auto u = unpack(b);
    CHECK(u == std::vector<double>{1.0, -1.0});
}

TEST_CASE("tail-straddling 5x67 round-trip is the identity") {
    std::mt19937_64 rng(12);
    const auto m = testsup::random_matrix(5, 67, rng);
    const BitMatrix b = pack_signs(m, 5, 67);
    const auto u = unpack(b);
    const BitMatrix b2 = pack_signs(u, 5, 67);
    CHECK(b == b2);
}

TEST_CASE("identical rows give +k, negated rows give -k") {
    std::mt19937_64 rng(13);
    const std::vector<double> row4 = {1.0, 1.0, 1.0, 1.0};
    CHECK(xnor_popcount_gemm(pack_signs(row4, 1, 4), pack_signs(row4, 1, 4)).at(0, 0) == 4);

    const auto r = testsup::random_matrix(1, 64, rng);
    std::vector<double> neg(64);
    for (std::size_t i = 0; i < 64; ++i) neg[i] = -testsup::sign_pm1(r[i]);
    CHECK(xnor_popcount_gemm(pack_signs(r, 1, 64), pack_signs(neg, 1, 64)).at(0, 0) == -64);
}

TEST_CASE("random 7x130 by 9x130 equals the naive integer matmul oracle") {
    std::mt19937_64 rng(14);
    const auto a = testsup::random_matrix(7, 130, rng);
    const auto b = testsup::random_matrix(9, 130, rng);
    const IntMatrix got = xnor_popcount_gemm(pack_signs(a, 7, 130), pack_signs(b, 9, 130));
    const auto want = testsup::naive_pm1_matmul(a, b, 7, 130, 9);
    for (std::size_t i = 0; i < 7; ++i)
        for (std::size_t j = 0; j < 9; ++j) CHECK(got.at(i, j) == want[i * 9 + j]);
}

TEST_CASE("dimension mismatch is a shape error") {
    std::mt19937_64 rng(15);
    const auto a = testsup::random_matrix(2, 8, rng);
    const auto b = testsup::random_matrix(2, 9, rng);
    CHECK_THROWS_AS(xnor_popcount_gemm(pack_signs(a, 2, 8), pack_signs(b, 2, 9)), ShapeError);
}

TEST_CASE("exhaustive equivalence with the oracle for k <= 8") {
    for (std::size_t k = 1; k <= 8; ++k) {
        std::vector<double> a(k), b(k);
        for (std::uint64_t am = 0; am < (std::uint64_t{1} << k); ++am) {
            for (std::size_t i = 0; i < k; ++i) a[i] = (am >> i) & 1 ? 1.0 : -1.0;
            const BitMatrix pa = pack_signs(a, 1, k);
            for (std::uint64_t bm = 0; bm < (std::uint64_t{1} << k); ++bm) {
                for (std::size_t i = 0; i < k; ++i) b[i] = (bm >> i) & 1 ? 1.0 : -1.0;
                const BitMatrix pb = pack_signs(b, 1, k);
                const int got = xnor_popcount_gemm(pa, pb).at(0, 0);
                const long want = testsup::naive_pm1_matmul(a, b, 1, k, 1)[0];
                REQUIRE(got == want);
            }
        }
    }
}

TEST_CASE("randomized equivalence up to k = 512 with non-word-aligned widths") {
    std::mt19937_64 rng(16);
    const std::size_t widths[] = {1, 3, 63, 64, 65, 127, 128, 129, 200, 511, 512};
    for (std::size_t k : widths) {
        std::uniform_int_distribution<std::size_t> mdist(1, 6);
        const std::size_t m = mdist(rng), n = mdist(rng);
        const auto a = testsup::random_matrix(m, k, rng);
        const auto b = testsup::random_matrix(n, k, rng);
        const IntMatrix got = xnor_popcount_gemm(pack_signs(a, m, k), pack_signs(b, n, k));
        const auto want = testsup::naive_pm1_matmul(a, b, m, k, n);
        for (std::size_t i = 0; i < m * n; ++i) {
            REQUIRE(got.data[i] == want[i]);
            // entries bounded by k with k's parity
            REQUIRE(std::abs(got.data[i]) <= static_cast<int>(k));
            REQUIRE(((got.data[i] - static_cast<int>(k)) % 2) == 0);
        }
    }
}

TEST_CASE("tail bits never contribute, even when the pad region is dirty") {
    std::mt19937_64 rng(17);
    const std::size_t k = 67;  // straddles a word boundary
    const auto a = testsup::random_matrix(3, k, rng);
    const auto b = testsup::random_matrix(4, k, rng);
    const BitMatrix pa = pack_signs(a, 3, k);
    BitMatrix pb = pack_signs(b, 4, k);
    const IntMatrix clean = xnor_popcount_gemm(pa, pb);
    // set every pad bit in b and re-multiply
    for (std::size_t r = 0; r < pb.rows; ++r)
        pb.data[r * pb.words_per_row + pb.words_per_row - 1] |= ~pb.tail_mask;
    CHECK_FALSE(pb.canonical());
    const IntMatrix dirty = xnor_popcount_gemm(pa, pb);
    CHECK(clean == dirty);
}

TEST_CASE("scaled_gemm with unit scales equals the raw product") {
    std::mt19937_64 rng(18);
    const auto a = testsup::random_matrix(4, 70, rng);
    const auto b = testsup::random_matrix(5, 70, rng);
    const BitMatrix pa = pack_signs(a, 4, 70), pb = pack_signs(b, 5, 70);
    const IntMatrix raw = xnor_popcount_gemm(pa, pb);
    const std::vector<double> ones(5, 1.0);
    const auto scaled = scaled_gemm(pa, pb, ones);
    for (std::size_t i = 0; i < scaled.size(); ++i)
        CHECK(scaled[i] == static_cast<double>(raw.data[i]));
}

TEST_CASE("scaled_gemm broadcast scale doubles the integer result") {
    std::mt19937_64 rng(19);
    const auto a = testsup::random_matrix(3, 10, rng);
    const auto b = testsup::random_matrix(1, 10, rng);
    const BitMatrix pa = pack_signs(a, 3, 10), pb = pack_signs(b, 1, 10);
    const IntMatrix raw = xnor_popcount_gemm(pa, pb);
    const std::vector<double> two = {2.0};
    const auto scaled = scaled_gemm(pa, pb, two);
    for (std::size_t i = 0; i < scaled.size(); ++i)
        CHECK(scaled[i] == 2.0 * static_cast<double>(raw.data[i]));
}

TEST_CASE("scaled_gemm matches the dense float oracle exactly") {
    std::mt19937_64 rng(20);
    const std::size_t m = 4, k = 33, n = 6;
    const auto a = testsup::random_matrix(m, k, rng);
    const auto b = testsup::random_matrix(n, k, rng);
    std::vector<double> alpha(n);
    std::uniform_real_distribution<double> adist(0.1, 3.0);
    for (double& v : alpha) v = adist(rng);
    const auto got = scaled_gemm(pack_signs(a, m, k), pack_signs(b, n, k), alpha);
    // dense float oracle: sign(a) times (alpha o sign(b))^T
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t l = 0; l < k; ++l)
                acc += testsup::sign_pm1(a[i * k + l]) * alpha[j] * testsup::sign_pm1(b[j * k + l]);
            CHECK(got[i * n + j] == doctest::Approx(acc).epsilon(1e-12));
        }
}

TEST_CASE("scaled_gemm rejects non-positive or mis-sized scales") {
    std::mt19937_64 rng(21);
    const auto a = testsup::random_matrix(2, 8, rng);
    const auto b = testsup::random_matrix(3, 8, rng);
    const BitMatrix pa = pack_signs(a, 2, 8), pb = pack_signs(b, 3, 8);
    const std::vector<double> bad = {1.0, -0.5, 2.0};
    CHECK_THROWS_AS(scaled_gemm(pa, pb, bad), DomainError);
    const std::vector<double> wrong_len = {1.0, 1.0};
    CHECK_THROWS_AS(scaled_gemm(pa, pb, wrong_len), ShapeError);
}
