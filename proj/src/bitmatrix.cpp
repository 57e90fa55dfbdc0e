#include "bivit/bitmatrix.hpp"

#include <bit>
#include <cassert>

#include "bivit/errors.hpp"

namespace bivit {

BitMatrix::BitMatrix(std::size_t r, std::size_t c)
    : rows(r),
      cols(c),
      words_per_row((c + kWordBits - 1) / kWordBits),
      data(rows * words_per_row, 0) {
    const std::size_t rem = cols % kWordBits;
    tail_mask = (rem == 0) ? ~std::uint64_t{0} : ((std::uint64_t{1} << rem) - 1);
}

bool BitMatrix::canonical() const {
    if (cols == 0 || rows == 0) return true;
    for (std::size_t r = 0; r < rows; ++r) {
        if (row(r)[words_per_row - 1] & ~tail_mask) return false;
    }
    return true;
}

BitMatrix pack_signs(std::span<const double> m, std::size_t rows, std::size_t cols) {
    if (m.size() != rows * cols) throw ShapeError("pack_signs: data length != rows*cols");
    BitMatrix b(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
        std::uint64_t* out = b.data.data() + r * b.words_per_row;
        const double* in = m.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) {
            if (in[c] >= 0.0) out[c / BitMatrix::kWordBits] |= std::uint64_t{1} << (c % BitMatrix::kWordBits);
        }
    }
    return b;
}

std::vector<double> unpack(const BitMatrix& b) {
    std::vector<double> m(b.rows * b.cols);
    for (std::size_t r = 0; r < b.rows; ++r) {
        for (std::size_t c = 0; c < b.cols; ++c) {
            m[r * b.cols + c] = b.bit(r, c) ? 1.0 : -1.0;
        }
    }
    return m;
}

IntMatrix xnor_popcount_gemm(const BitMatrix& a, const BitMatrix& b) {
    if (a.cols != b.cols) throw ShapeError("xnor_popcount_gemm: reduction widths differ");
    // int32 accumulation is exact for k <= 2^15; beyond that is a caller bug.
    assert(a.cols <= (std::size_t{1} << 15));
    const std::size_t k = a.cols;
    const std::size_t nw = a.words_per_row;
    IntMatrix out(a.rows, b.rows);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const std::uint64_t* ra = a.row(i);
        std::int32_t* dst = out.data.data() + i * b.rows;
        for (std::size_t j = 0; j < b.rows; ++j) {
            const std::uint64_t* rb = b.row(j);
            std::size_t matches = 0;
            for (std::size_t w = 0; w < nw; ++w) {
                std::uint64_t x = ~(ra[w] ^ rb[w]);
                if (w + 1 == nw) x &= a.tail_mask;  // pad bits never contribute
                matches += static_cast<std::size_t>(std::popcount(x));
            }
            dst[j] = static_cast<std::int32_t>(2 * matches) - static_cast<std::int32_t>(k);
        }
    }
    return out;
}

std::vector<double> scaled_gemm(const BitMatrix& a, const BitMatrix& b,
                                std::span<const double> alpha) {
    if (alpha.size() != b.rows && alpha.size() != 1)
        throw ShapeError("scaled_gemm: alpha length must be 1 or b.rows");
    for (double s : alpha) {
        if (!(s > 0.0)) throw DomainError("scaled_gemm: alpha must be positive");
    }
    const IntMatrix raw = xnor_popcount_gemm(a, b);
    std::vector<double> out(raw.data.size());
    const bool broadcast = alpha.size() == 1;
    for (std::size_t i = 0; i < raw.rows; ++i) {
        for (std::size_t j = 0; j < raw.cols; ++j) {
            const double s = broadcast ? alpha[0] : alpha[j];
            out[i * raw.cols + j] = s * raw.at(i, j);
        }
    }
    return out;
}

} // namespace bivit
