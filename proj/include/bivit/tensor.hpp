#pragma once

#include <cstddef>
#include <random>
#include <vector>

namespace bivit {

// Dense row-major double tensor. The shape is dynamic; ops in the tape
// engine work on ranks 0-3.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> values;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> s);
    Tensor(std::vector<std::size_t> s, std::vector<double> v);

    static Tensor scalar(double v) { return Tensor({}, {v}); }
    static Tensor zeros(std::vector<std::size_t> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<std::size_t> s, double v);

    std::size_t size() const { return values.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t dim(std::size_t i) const { return shape[i]; }

    double& at(std::size_t i) { return values[i]; }
    double at(std::size_t i) const { return values[i]; }
    double& at(std::size_t i, std::size_t j) { return values[i * shape[1] + j]; }
    double at(std::size_t i, std::size_t j) const { return values[i * shape[1] + j]; }
    double& at(std::size_t i, std::size_t j, std::size_t k) {
        return values[(i * shape[1] + j) * shape[2] + k];
    }
    double at(std::size_t i, std::size_t j, std::size_t k) const {
        return values[(i * shape[1] + j) * shape[2] + k];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    bool all_finite() const;

    void fill_normal(std::mt19937_64& rng, double mean = 0.0, double stddev = 1.0);
    void fill_uniform(std::mt19937_64& rng, double lo, double hi);
};

std::size_t shape_size(const std::vector<std::size_t>& s);
std::string shape_str(const std::vector<std::size_t>& s);

} // namespace bivit
