#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace bivit {

// Bit-packed sign matrix. Bit set <=> logical value +1, bit clear <=> -1.
// Rows are packed along the column dimension into 64-bit words; all padding
// bits past `cols` in the last word of each row are kept zero (canonical form).
struct BitMatrix {
    static constexpr std::size_t kWordBits = 64;

    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t words_per_row = 0;
    std::uint64_t tail_mask = 0;  // valid bits of the last word in each row
    std::vector<std::uint64_t> data;

    BitMatrix() = default;
    BitMatrix(std::size_t r, std::size_t c);

    bool bit(std::size_t r, std::size_t c) const {
        return (data[r * words_per_row + c / kWordBits] >> (c % kWordBits)) & 1u;
    }
    void set_bit(std::size_t r, std::size_t c, bool v) {
        std::uint64_t& w = data[r * words_per_row + c / kWordBits];
        const std::uint64_t m = std::uint64_t{1} << (c % kWordBits);
        w = v ? (w | m) : (w & ~m);
    }
    const std::uint64_t* row(std::size_t r) const { return data.data() + r * words_per_row; }

    // True iff all padding bits are zero.
    bool canonical() const;

    bool operator==(const BitMatrix& o) const = default;
};

// Exact integer accumulator for popcount GEMM. Entries of a product of
// k-length +-1 vectors lie in [-k, k] and share k's parity.
struct IntMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::int32_t> data;

    IntMatrix() = default;
    IntMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0) {}

    std::int32_t& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    std::int32_t at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    bool operator==(const IntMatrix& o) const = default;
};

// b = sign(m) with sign(0) := +1; bit set iff entry >= 0. Padding bits cleared.
BitMatrix pack_signs(std::span<const double> m, std::size_t rows, std::size_t cols);

// Entries in {-1.0, +1.0}; pack_signs(unpack(b)) == b.
std::vector<double> unpack(const BitMatrix& b);

// out[i][j] = dot of +-1 row i of a and row j of b, computed as
// 2*popcount(xnor & valid_mask) - k. Exact; requires a.cols == b.cols.
IntMatrix xnor_popcount_gemm(const BitMatrix& a, const BitMatrix& b);

// out[i][j] = alpha[j] * xnor_popcount_gemm(a, b)[i][j]; alpha has one entry
// per output channel (b row) or a single broadcast entry. Row-major result.
std::vector<double> scaled_gemm(const BitMatrix& a, const BitMatrix& b,
                                std::span<const double> alpha);

} // namespace bivit
