#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "bivit/tensor.hpp"

namespace testsup {

// Independent oracle: naive triple-loop integer matmul of +-1 matrices,
// rows of a against rows of b (both packed along the reduction dim).
inline std::vector<long> naive_pm1_matmul(const std::vector<double>& a,
                                          const std::vector<double>& b, std::size_t m,
                                          std::size_t k, std::size_t n) {
    std::vector<long> out(m * n, 0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            long acc = 0;
            for (std::size_t l = 0; l < k; ++l) {
                const long av = a[i * k + l] >= 0.0 ? 1 : -1;
                const long bv = b[j * k + l] >= 0.0 ? 1 : -1;
                acc += av * bv;
            }
            out[i * n + j] = acc;
        }
    return out;
}

inline std::vector<double> random_matrix(std::size_t rows, std::size_t cols,
                                         std::mt19937_64& rng, double lo = -2.0,
                                         double hi = 2.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> m(rows * cols);
    for (double& v : m) v = dist(rng);
    return m;
}

inline double sign_pm1(double v) { return v >= 0.0 ? 1.0 : -1.0; }

} // namespace testsup
